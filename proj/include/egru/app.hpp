#pragma once

#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "egru/gradcheck.hpp"
#include "egru/metrics.hpp"

namespace egru::app {

using Json = nlohmann::json;

/// Raised for unknown keys or ill-typed values in a run config.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a loss or gradient turns non-finite during training.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Documented defaults for each command. Every command reads `name`,
/// `seed`, `threads` and `out`; the rest is command specific.
Json default_config(const std::string& command);

/// Defaults patched with `user`. Keys that the defaults do not know are
/// rejected so that typos fail loudly.
Json resolve_config(const std::string& command, const Json& user);

/// Output directory of a run: `out` if set, otherwise runs/<name>.
std::filesystem::path run_dir(const Json& cfg);

/// Creates the run directory and writes the resolved config.json into it.
std::filesystem::path prepare_run_dir(const Json& cfg);

// ---- gradcheck ----

struct GradcheckSummary {
  std::string model;
  std::size_t instances = 0;        ///< checked instances
  std::size_t rejected = 0;         ///< continuous only: screened-out seeds
  std::size_t failed = 0;
  double max_rel = 0.0;
  std::vector<check::BlockError> blocks;  ///< worst error per block over all instances
  double seconds = 0.0;
  bool passed = false;
};

GradcheckSummary run_gradcheck(const Json& cfg, std::ostream& log);

// ---- delay copy ----

struct DelayCopySummary {
  bool converged = false;
  std::size_t steps = 0;         ///< optimizer steps taken
  double accuracy = 0.0;         ///< bitwise accuracy at the last evaluation
  double initial_accuracy = 0.0;
  std::size_t final_events = 0;  ///< internal events over all patterns, last evaluation
  double seconds = 0.0;
  std::filesystem::path dir;
};

DelayCopySummary run_train_delay_copy(const Json& cfg, std::ostream& log);

// ---- sequential MNIST ----

struct SmnistSummary {
  std::size_t epochs = 0;
  double train_loss = 0.0;
  double test_accuracy = 0.0;
  metrics::MacReport test_report;
  double seconds = 0.0;
  std::filesystem::path dir;
};

SmnistSummary run_train_smnist(const Json& cfg, std::ostream& log);

/// Test accuracy and sparsity report of a saved sMNIST checkpoint.
struct SmnistEval {
  double accuracy = 0.0;
  metrics::MacReport report;
};

SmnistEval evaluate_smnist_checkpoint(const std::filesystem::path& checkpoint, const Json& cfg);

// ---- discrete vs continuous ----

struct CompareLevel {
  double dt = 0.0;
  double max_error = 0.0;
};

struct CompareSummary {
  std::vector<CompareLevel> levels;
  std::vector<double> ratios;  ///< error(dt) / error(dt / 2) for consecutive levels
  double order = 0.0;          ///< least-squares slope of log error against log dt
  double c_inf = 0.0;          ///< max |c| of the reference trajectory
  bool events_free = true;
};

CompareSummary run_compare_dt_ct(const Json& cfg, std::ostream& log);

// ---- sparsity bench ----

struct BenchSummary {
  metrics::MacReport report;
  std::size_t sequences = 0;
};

BenchSummary run_bench_sparsity(const Json& cfg, std::ostream& log);

/// Command dispatch used by the CLI. Returns the process exit status.
int run_command(const std::string& command, const Json& cfg, std::ostream& log);

}  // namespace egru::app
