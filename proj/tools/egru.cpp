// Command-line entry point: egru <command> [--config PATH] [--seed N]
// [--threads N] [--out DIR] [--set key=json ...]

#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "egru/app.hpp"

namespace {

using egru::app::Json;

Json parse_override(const std::string& kv) {
  const auto eq = kv.find('=');
  if (eq == std::string::npos || eq == 0) throw egru::app::ConfigError("--set expects key=value, got '" + kv + "'");
  const std::string key = kv.substr(0, eq), text = kv.substr(eq + 1);
  Json value = Json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;  // bare strings need no quotes
  return {{key, value}};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App cli{"EGRU training, gradient checks and benchmarks"};
  cli.require_subcommand(1);

  std::string config_path, out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
  std::vector<std::string> sets;
  bool print_config = false;

  const std::vector<std::pair<std::string, std::string>> commands = {
      {"gradcheck", "compare analytic gradients with an oracle"},
      {"train_delay_copy", "train the 2-unit continuous model on delay copy"},
      {"train_smnist", "train the discrete model on sequential MNIST"},
      {"compare_dt_ct", "Euler-discretized recursion against the continuous flow"},
      {"bench_sparsity", "activity sparsity and effective MACs of a model"},
  };
  for (const auto& [name, help] : commands) {
    auto* sub = cli.add_subcommand(name, help);
    sub->add_option("--config", config_path, "JSON run config");
    sub->add_option("--seed", seed, "random seed");
    sub->add_option("--threads", threads, "worker threads; results do not depend on it");
    sub->add_option("--out", out, "output directory (default runs/<name>)");
    sub->add_option("--set", sets, "override a top-level key, e.g. --set epochs=1");
    sub->add_flag("--print-config", print_config, "print the resolved config and exit");
  }
  CLI11_PARSE(cli, argc, argv);
  const std::string command = cli.get_subcommands().front()->get_name();

  try {
    Json user = Json::object();
    if (!config_path.empty()) {
      std::ifstream in(config_path);
      if (!in) throw egru::app::ConfigError("cannot read config " + config_path);
      user = Json::parse(in);
    }
    for (const auto& s : sets) user.merge_patch(parse_override(s));
    if (seed) user["seed"] = *seed;
    if (threads) user["threads"] = *threads;
    if (!out.empty()) user["out"] = out;
    const Json cfg = egru::app::resolve_config(command, user);
    if (print_config) {
      std::cout << cfg.dump(2) << '\n';
      return 0;
    }
    return egru::app::run_command(command, cfg, std::cout);
  } catch (const std::exception& e) {
    std::cerr << "egru " << command << ": " << e.what() << '\n';
    return 2;
  }
}
