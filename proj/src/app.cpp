#include "egru/app.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <cstdio>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>
#include <thread>

#include "egru/adjoint.hpp"
#include "egru/data.hpp"
#include "egru/discrete.hpp"
#include "egru/optim.hpp"

namespace egru::app {

namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

Json common_defaults(const std::string& name) {
  return {{"name", name}, {"seed", 1}, {"threads", 1}, {"out", ""}};
}

Json model_defaults() {
  return {{"tau_s", 5.0},         {"tau_m", 1.0},         {"epsilon", 0.5},
          {"pd_peak", 1.0},       {"theta_transform", "sigmoid"}, {"theta_mode", "per_unit"},
          {"reset_mode", "subtract"}};
}

void check_keys(const Json& defaults, const Json& user, const std::string& where) {
  if (!user.is_object()) throw ConfigError("config" + where + " must be a JSON object");
  for (auto it = user.begin(); it != user.end(); ++it) {
    if (!defaults.contains(it.key())) throw ConfigError("unknown config key '" + where + it.key() + "'");
    const Json& d = defaults.at(it.key());
    if (d.is_object() && !it.value().is_null()) check_keys(d, it.value(), where + it.key() + ".");
  }
}

template <class T>
T get(const Json& cfg, const char* key) {
  try {
    return cfg.at(key).get<T>();
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("config key '") + key + "': " + e.what());
  }
}

ParamConfig param_config(const Json& cfg) {
  ParamConfig pc;
  pc.tau_s = get<double>(cfg, "tau_s");
  pc.tau_m = get<double>(cfg, "tau_m");
  pc.epsilon = get<double>(cfg, "epsilon");
  pc.pd_peak = get<double>(cfg, "pd_peak");
  pc.theta_transform = threshold_transform_from_string(get<std::string>(cfg, "theta_transform"));
  pc.theta_mode = threshold_mode_from_string(get<std::string>(cfg, "theta_mode"));
  pc.reset_mode = reset_mode_from_string(get<std::string>(cfg, "reset_mode"));
  return pc;
}

/// Raw threshold value that the configured transform maps to `theta`.
double raw_for_threshold(const ParamConfig& pc, double theta) {
  if (!(theta > 0)) throw ConfigError("threshold must be positive");
  if (pc.theta_transform == ThresholdTransform::sigmoid) {
    if (!(theta < 1)) throw ConfigError("the sigmoid threshold transform needs theta < 1");
    return std::log(theta / (1.0 - theta));
  }
  return theta;
}

/// Runs fn(k) for k in [0, count) on `threads` workers. Results are stored
/// by index, so callers that reduce them in index order get the same bits
/// for any thread count.
template <class R, class F>
std::vector<R> parallel_map(std::size_t count, std::size_t threads, F fn) {
  std::vector<R> out(count);
  threads = std::max<std::size_t>(1, std::min(threads, count));
  if (threads == 1) {
    for (std::size_t k = 0; k < count; ++k) out[k] = fn(k);
    return out;
  }
  std::vector<std::exception_ptr> errors(threads);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < threads; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t k = w; k < count; k += threads) out[k] = fn(k);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return out;
}

bool all_finite(const Gradients& g) {
  return std::isfinite(g.squared_norm());
}

}  // namespace

Json default_config(const std::string& command) {
  Json cfg = common_defaults(command);
  if (command == "gradcheck") {
    cfg.update({{"model", "continuous"},
                {"instances", 20},
                {"max_n", 4},
                {"max_T", 6},
                {"max_events", 6},
                {"h", 1e-5},
                {"rel_tol", nullptr},
                {"abs_floor", 1e-8},
                {"max_seeds", 5000},
                {"negative_control", false}});
  } else if (command == "train_delay_copy") {
    cfg.update(model_defaults());
    cfg.update({{"n", 2},
                {"tau_kappa", 1.0},
                {"theta", 0.5},
                {"candidate_bias", -1.5},
                {"readout_gain", 4.0},
                {"readout_bias", -1.0},
                {"lr", 0.02},
                {"max_steps", 5000},
                {"stop_at_perfect", true},
                {"max_step", 0.0},
                {"tol_event", 1e-9},
                {"wall_clock", true},
                {"task",
                 {{"n_bits", 2}, {"input_time", 0.5}, {"input_window", 1.0}, {"delay", 5.0}, {"recall_window", 2.0},
                  {"value", 1.0}}}});
  } else if (command == "train_smnist") {
    cfg.update(model_defaults());
    cfg.update({{"n", 128},
                {"epochs", 20},
                {"batch", 500},
                {"chunk", 25},
                {"lr", 1e-3},
                {"clip", 0.25},
                {"tau_kappa", 10.0},
                {"pool", 2},
                {"data_dir", "/root/data/mnist"},
                {"train_limit", 0},
                {"test_limit", 0},
                {"w_reg", 0.0},
                {"w_v", 0.0},
                {"wall_clock", true}});
    // Damped surrogate: with peak 1 the 196-step BPTT blows up within a few
    // hundred updates.
    cfg["pd_peak"] = 0.3;
  } else if (command == "compare_dt_ct") {
    cfg.update({{"n", 4},
                {"d", 2},
                {"tau_s", 5.0},
                {"tau_m", 1.0},
                {"T", 4.0},
                {"dts", {0.2, 0.1, 0.05}},
                {"reference_step", 1e-3},
                {"input_scale", 2.0},
                {"zero_input", false}});
  } else if (command == "bench_sparsity") {
    cfg.update(model_defaults());
    cfg.update({{"checkpoint", ""},
                {"n", 128},
                {"theta", nullptr},
                {"dataset", "smnist"},
                {"data_dir", "/root/data/mnist"},
                {"pool", 2},
                {"limit", 1000},
                {"random_steps", 100},
                {"random_d", 1},
                {"random_density", 0.3}});
  } else {
    throw ConfigError("unknown command '" + command + "'");
  }
  return cfg;
}

Json resolve_config(const std::string& command, const Json& user) {
  Json cfg = default_config(command);
  if (user.is_null()) return cfg;
  check_keys(cfg, user, "");
  cfg.merge_patch(user);
  return cfg;
}

fs::path run_dir(const Json& cfg) {
  const auto out = get<std::string>(cfg, "out");
  if (!out.empty()) return out;
  return fs::path("runs") / get<std::string>(cfg, "name");
}

fs::path prepare_run_dir(const Json& cfg) {
  const fs::path dir = run_dir(cfg);
  fs::create_directories(dir);
  std::ofstream os(dir / "config.json");
  if (!os) throw std::runtime_error("cannot write " + (dir / "config.json").string());
  os << cfg.dump(2) << '\n';
  return dir;
}

// ---------------------------------------------------------------- gradcheck

GradcheckSummary run_gradcheck(const Json& cfg, std::ostream& log) {
  const auto t0 = Clock::now();
  GradcheckSummary sum;
  sum.model = get<std::string>(cfg, "model");
  const auto target = get<std::size_t>(cfg, "instances");
  const auto seed0 = get<std::uint64_t>(cfg, "seed");
  const auto max_n = get<std::size_t>(cfg, "max_n");
  const auto max_seeds = get<std::size_t>(cfg, "max_seeds");
  const bool negative = get<bool>(cfg, "negative_control");

  auto merge = [&](const check::GradcheckReport& r) {
    sum.max_rel = std::max(sum.max_rel, r.max_rel);
    for (const auto& b : r.blocks) {
      auto it = std::find_if(sum.blocks.begin(), sum.blocks.end(), [&](auto& x) { return x.name == b.name; });
      if (it == sum.blocks.end()) {
        sum.blocks.push_back(b);
      } else {
        it->max_rel = std::max(it->max_rel, b.max_rel);
        it->max_abs = std::max(it->max_abs, b.max_abs);
      }
    }
    if (!r.passed) ++sum.failed;
  };

  if (sum.model == "continuous") {
    check::GradcheckOptions opt;
    opt.h = get<double>(cfg, "h");
    opt.rel_tol = cfg.at("rel_tol").is_null() ? 1e-2 : get<double>(cfg, "rel_tol");
    opt.abs_floor = get<double>(cfg, "abs_floor");
    opt.backward.flip_update_xi_sign = negative;
    const auto max_events = get<std::size_t>(cfg, "max_events");
    for (std::size_t k = 0; k < max_seeds && sum.instances < target; ++k) {
      const auto c = check::random_continuous_case(seed0 + k, max_n);
      if (check::screen_case(c, max_events)) {
        ++sum.rejected;
        continue;
      }
      const auto r = check::continuous_gradcheck(c, opt);
      if (!r.structure_stable) {
        ++sum.rejected;
        continue;
      }
      ++sum.instances;
      merge(r);
      log << "seed " << seed0 + k << ": n=" << c.params.n << " events=" << r.internal_events
          << " max_rel=" << r.max_rel << (r.passed ? " ok" : " FAIL") << '\n';
    }
  } else if (sum.model == "discrete") {
    if (negative) throw ConfigError("negative_control is only defined for the continuous model");
    const double tol = cfg.at("rel_tol").is_null() ? 1e-9 : get<double>(cfg, "rel_tol");
    const auto max_T = get<std::size_t>(cfg, "max_T");
    for (std::size_t k = 0; k < target; ++k) {
      const auto r = check::discrete_gradcheck(seed0 + k, max_n, max_T, tol);
      ++sum.instances;
      merge(r);
    }
  } else {
    throw ConfigError("gradcheck model must be 'continuous' or 'discrete'");
  }
  sum.seconds = seconds_since(t0);
  sum.passed = sum.instances == target && sum.failed == 0;
  for (const auto& b : sum.blocks) {
    char line[128];
    std::snprintf(line, sizeof line, "%10s  max_rel %.3e  max_abs %.3e\n", b.name.c_str(), b.max_rel, b.max_abs);
    log << line;
  }
  log << sum.model << " gradcheck: " << sum.instances << " instances";
  if (sum.model == "continuous") log << " (" << sum.rejected << " seeds screened out)";
  log << ", " << sum.failed << " failed, max rel err " << sum.max_rel << ", " << fixed(sum.seconds, 2) << " s"
      << (sum.passed ? "  PASS" : "  FAIL") << '\n';
  return sum;
}

// ---------------------------------------------------------------- delay copy

namespace {

struct DelayCopySetup {
  LayerParams params;
  Readout readout;
  continuous::SimConfig sim;
  std::vector<data::DelayCopySample> patterns;
};

DelayCopySetup delay_copy_setup(const Json& cfg) {
  DelayCopySetup s;
  const Json& task = cfg.at("task");
  data::DelayCopyConfig dc;
  dc.n_bits = get<std::size_t>(task, "n_bits");
  dc.input_time = get<double>(task, "input_time");
  dc.input_window = get<double>(task, "input_window");
  dc.delay = get<double>(task, "delay");
  dc.recall_window = get<double>(task, "recall_window");
  dc.value = get<double>(task, "value");
  s.patterns = data::delay_copy_all_patterns(dc);

  const auto n = get<std::size_t>(cfg, "n");
  const ParamConfig pc = param_config(cfg);
  s.params = init_params(n, dc.n_bits + 1, get<std::uint64_t>(cfg, "seed"), pc);
  const double raw = raw_for_threshold(pc, get<double>(cfg, "theta"));
  for (auto& t : s.params.theta_raw) t = raw;
  // The activations relax to -b, so a negative candidate bias is a tonic
  // positive drive that lets units fire before training.
  for (auto& b : s.params.b[kCandidate]) b = get<double>(cfg, "candidate_bias");

  // One trace per unit; output j reads trace j.
  s.sim.output_map = Mat(n, n);
  for (std::size_t i = 0; i < n; ++i) s.sim.output_map(i, i) = 1.0;
  s.sim.tau_kappa = get<double>(cfg, "tau_kappa");
  s.sim.integ.max_step = get<double>(cfg, "max_step");
  s.sim.integ.tol_event = get<double>(cfg, "tol_event");

  s.readout.W = Mat(dc.n_bits, n);
  for (std::size_t j = 0; j < std::min(dc.n_bits, n); ++j) s.readout.W(j, j) = get<double>(cfg, "readout_gain");
  s.readout.b.assign(dc.n_bits, get<double>(cfg, "readout_bias"));
  return s;
}

struct PatternResult {
  Gradients grads;
  ReadoutGradients readout_grads;
  double loss = 0.0;
  std::size_t correct_bits = 0;
  std::size_t events = 0;
  std::size_t input_events = 0;
  std::size_t active_bins = 0;
  std::size_t bins = 0;
};

continuous::Trajectory simulate_pattern(const DelayCopySetup& s, const data::DelayCopySample& pat) {
  auto sim = s.sim;
  sim.readout_times = {pat.readout_time};
  return continuous::simulate(s.params, pat.inputs, pat.readout_time, sim);
}

PatternResult delay_copy_pattern(const DelayCopySetup& s, const data::DelayCopySample& pat) {
  const auto traj = simulate_pattern(s, pat);
  const auto& ro = s.readout;
  PatternResult res;
  res.readout_grads = ReadoutGradients::zeros_like(ro);
  adjoint::LossSpec loss;
  loss.readouts.push_back({pat.readout_time, [&](const Vec&, const Vec& tr, Vec&, Vec& dtr) {
                             Vec logits = ro.b;
                             for (std::size_t j = 0; j < ro.W.rows(); ++j) {
                               for (std::size_t k = 0; k < ro.W.cols(); ++k) logits[j] += ro.W(j, k) * tr[k];
                             }
                             const auto lg = optim::bce_with_logits(logits, pat.target);
                             for (std::size_t j = 0; j < logits.size(); ++j) {
                               res.correct_bits += (logits[j] > 0.0) == (pat.target[j] > 0.5);
                               res.readout_grads.db[j] += lg.grad[j];
                               for (std::size_t k = 0; k < ro.W.cols(); ++k) {
                                 res.readout_grads.dW(j, k) += lg.grad[j] * tr[k];
                                 dtr[k] += lg.grad[j] * ro.W(j, k);
                               }
                             }
                             return lg.loss;
                           }});
  auto back = adjoint::backward(traj, loss, s.params);
  res.grads = std::move(back.grads);
  res.loss = back.loss;

  // Activity over bins of width tau_m, for the metrics columns.
  const double tm = s.params.config.tau_m;
  res.bins = static_cast<std::size_t>(std::ceil(traj.T / tm));
  std::vector<std::uint8_t> active(res.bins * traj.n, 0);
  for (const auto& rec : traj.events) {
    if (rec.event.kind == continuous::EventKind::input) {
      ++res.input_events;
      continue;
    }
    ++res.events;
    const auto bin = std::min(res.bins - 1, static_cast<std::size_t>(rec.event.s / tm));
    active[bin * traj.n + rec.event.unit] = 1;
  }
  res.active_bins = std::accumulate(active.begin(), active.end(), std::size_t{0});
  return res;
}

void write_delay_copy_raster(const fs::path& path, const DelayCopySetup& s) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << std::setprecision(17);
  for (const auto& pat : s.patterns) {
    os << "# pattern";
    for (double b : pat.target) os << ' ' << static_cast<int>(b);
    os << " readout_time " << pat.readout_time << '\n';
    continuous::write_raster(os, simulate_pattern(s, pat));
  }
}

}  // namespace

DelayCopySummary run_train_delay_copy(const Json& cfg, std::ostream& log) {
  const auto t0 = Clock::now();
  DelayCopySetup s = delay_copy_setup(cfg);
  DelayCopySummary sum;
  sum.dir = prepare_run_dir(cfg);
  metrics::CsvWriter csv(sum.dir / "metrics.csv");

  optim::AdamConfig ac;
  ac.lr = get<double>(cfg, "lr");
  optim::AdamState adam(ac);
  const auto max_steps = get<std::size_t>(cfg, "max_steps");
  const bool stop = get<bool>(cfg, "stop_at_perfect");
  const bool wall = get<bool>(cfg, "wall_clock");
  const auto threads = get<std::size_t>(cfg, "threads");
  const std::size_t P = s.patterns.size();
  const std::size_t bits = P * s.readout.b.size();
  const std::size_t n = s.params.n, d = s.params.d;

  for (std::size_t step = 0;; ++step) {
    auto results = parallel_map<PatternResult>(P, threads, [&](std::size_t k) {
      return delay_copy_pattern(s, s.patterns[k]);
    });
    Gradients g = Gradients::zeros_like(s.params);
    ReadoutGradients rg = ReadoutGradients::zeros_like(s.readout);
    double loss = 0.0;
    std::size_t correct = 0, events = 0, inputs = 0, active = 0, bins = 0;
    for (const auto& r : results) {
      g += r.grads;
      rg += r.readout_grads;
      loss += r.loss;
      correct += r.correct_bits;
      events += r.events;
      inputs += r.input_events;
      active += r.active_bins;
      bins += r.bins;
    }
    loss /= static_cast<double>(P);
    const double acc = static_cast<double>(correct) / static_cast<double>(bits);
    if (step == 0) sum.initial_accuracy = acc;
    sum.accuracy = acc;
    sum.final_events = events;
    sum.steps = step;

    metrics::MetricsRow row;
    row.epoch = step;
    row.train_loss = loss;
    row.val_metric = acc;
    row.alpha = 1.0 - static_cast<double>(active) / static_cast<double>(bins * n);
    row.beta = row.alpha;
    row.effective_mac = kNumGates * ((n - 1) * events + n * inputs);
    row.dense_mac = kNumGates * bins * n * (n + d);
    row.wall_seconds = wall ? seconds_since(t0) : 0.0;
    csv.write(row);

    if (!std::isfinite(loss) || !all_finite(g)) {
      std::ostringstream msg;
      msg << "delay copy diverged at step " << step << ": loss " << loss << ", |grad|^2 " << g.squared_norm();
      throw DivergenceError(msg.str());
    }
    if (step % 100 == 0 || acc == 1.0) {
      log << "step " << step << " loss " << loss << " bit accuracy " << acc << " events " << events << std::endl;
    }
    if ((stop && acc == 1.0) || step == max_steps) {
      sum.converged = acc == 1.0;
      break;
    }
    const double inv = 1.0 / static_cast<double>(P);
    g.scale(inv);
    for (auto& x : rg.dW.data()) x *= inv;
    for (auto& x : rg.db) x *= inv;
    optim::adam_step(s.params, g, adam, &s.readout, &rg);
  }

  save_checkpoint(sum.dir / "checkpoint", s.params, &s.readout);
  write_delay_copy_raster(sum.dir / "events.txt", s);
  sum.seconds = seconds_since(t0);
  log << (sum.converged ? "reached" : "did not reach") << " 100% bit accuracy after " << sum.steps << " steps ("
      << fixed(sum.seconds, 1) << " s)\n";
  return sum;
}

// ---------------------------------------------------------------- sMNIST

namespace {

struct SmnistData {
  data::MnistSet train, test;
};

fs::path find_idx(const fs::path& dir, const std::string& stem) {
  for (const auto& name : {stem, stem + ".gz"}) {
    if (fs::exists(dir / name)) return dir / name;
  }
  throw std::runtime_error("missing data file " + (dir / stem).string() + "[.gz]");
}

data::MnistSet load_split(const fs::path& dir, const std::string& prefix, std::size_t pool, std::size_t limit) {
  auto set = data::mnist_idx_load(find_idx(dir, prefix + "-images-idx3-ubyte"),
                                  find_idx(dir, prefix + "-labels-idx1-ubyte"));
  if (limit > 0 && limit < set.size()) {
    Mat imgs(limit, set.images.cols());
    std::copy_n(set.images.data().begin(), limit * set.images.cols(), imgs.data().begin());
    set.images = std::move(imgs);
    set.labels.resize(limit);
  }
  return pool > 1 ? data::downscale_set(set, pool) : set;
}

struct ChunkResult {
  Gradients grads;
  ReadoutGradients readout_grads;
  double loss = 0.0;
  std::size_t correct = 0;
  metrics::SparsityMeter meter;
};

struct SampleModel {
  const LayerParams& params;
  const Readout& readout;
  double kappa;
  optim::RegularizerConfig reg;
};

/// Forward pass, softmax on the final output trace and, when `out` carries
/// gradient buffers, sparse BPTT.
void smnist_sample(const SampleModel& m, std::span<const double> image, std::size_t label, ChunkResult& out,
                   bool train) {
  const auto& p = m.params;
  const auto& ro = m.readout;
  const Mat x = data::sequentialize(image);
  OpCounter fwd, rec;
  const auto trace = discrete::egru_forward(p, x, fwd, {}, &rec);
  out.meter.add(trace, p, fwd, rec);

  const std::size_t T = trace.steps(), n = p.n;
  Vec tr(n, 0.0);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t i = 0; i < n; ++i) tr[i] = m.kappa * tr[i] + trace.y(t, i);
  }
  Vec logits = ro.b;
  for (std::size_t k = 0; k < ro.W.rows(); ++k) {
    for (std::size_t i = 0; i < n; ++i) logits[k] += ro.W(k, i) * tr[i];
  }
  const auto lg = optim::cross_entropy_softmax(logits, label);
  out.loss += lg.loss;
  out.correct += static_cast<std::size_t>(std::max_element(logits.begin(), logits.end()) - logits.begin()) == label;
  if (!train) return;

  Vec dtr(n, 0.0);
  for (std::size_t k = 0; k < ro.W.rows(); ++k) {
    out.readout_grads.db[k] += lg.grad[k];
    for (std::size_t i = 0; i < n; ++i) {
      out.readout_grads.dW(k, i) += lg.grad[k] * tr[i];
      dtr[i] += lg.grad[k] * ro.W(k, i);
    }
  }
  Mat dy(T, n);
  double w = 1.0;
  for (std::size_t t = T; t-- > 0;) {
    for (std::size_t i = 0; i < n; ++i) dy(t, i) = w * dtr[i];
    w *= m.kappa;
  }
  discrete::StateGradients extra;
  optim::RegularizerResult regs;
  if (m.reg.w_reg != 0.0 || m.reg.w_v != 0.0) {
    regs = optim::sparsity_regularizers(trace, p, m.reg);
    extra.dL_dc = &regs.dL_dc;
    extra.dL_dtheta = &regs.dL_dtheta;
    out.loss += regs.l_reg + regs.l_act;
  }
  OpCounter bwd;
  out.grads += discrete::egru_backward(p, trace, dy, {}, bwd, extra);
  out.meter.backward += bwd;
}

ChunkResult empty_chunk(const LayerParams& p, const Readout& ro, bool train) {
  ChunkResult c;
  if (train) {
    c.grads = Gradients::zeros_like(p);
    c.readout_grads = ReadoutGradients::zeros_like(ro);
  }
  c.meter = metrics::SparsityMeter(p.n, p.d);
  return c;
}

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
  metrics::SparsityMeter meter;
};

EvalResult smnist_evaluate(const SampleModel& m, const data::MnistSet& set, std::size_t chunk, std::size_t threads) {
  const std::size_t N = set.size();
  const std::size_t chunks = (N + chunk - 1) / chunk;
  auto parts = parallel_map<ChunkResult>(chunks, threads, [&](std::size_t c) {
    ChunkResult r = empty_chunk(m.params, m.readout, false);
    for (std::size_t k = c * chunk; k < std::min(N, (c + 1) * chunk); ++k) {
      smnist_sample(m, set.images.row(k), set.labels[k], r, false);
    }
    return r;
  });
  EvalResult e;
  e.meter = metrics::SparsityMeter(m.params.n, m.params.d);
  std::size_t correct = 0;
  for (const auto& r : parts) {
    e.loss += r.loss;
    correct += r.correct;
    e.meter += r.meter;
  }
  e.loss /= static_cast<double>(N);
  e.accuracy = static_cast<double>(correct) / static_cast<double>(N);
  return e;
}

}  // namespace

SmnistSummary run_train_smnist(const Json& cfg, std::ostream& log) {
  const auto t0 = Clock::now();
  SmnistSummary sum;
  const fs::path data_dir = get<std::string>(cfg, "data_dir");
  const auto pool = get<std::size_t>(cfg, "pool");
  const auto train = load_split(data_dir, "train", pool, get<std::size_t>(cfg, "train_limit"));
  const auto test = load_split(data_dir, "t10k", pool, get<std::size_t>(cfg, "test_limit"));
  sum.dir = prepare_run_dir(cfg);
  metrics::CsvWriter csv(sum.dir / "metrics.csv");

  const auto seed = get<std::uint64_t>(cfg, "seed");
  const auto n = get<std::size_t>(cfg, "n");
  LayerParams p = init_params(n, 1, seed, param_config(cfg));
  Readout ro = Readout::init(10, n, seed + 1);
  optim::AdamConfig ac;
  ac.lr = get<double>(cfg, "lr");
  optim::AdamState adam(ac);
  const double clip = get<double>(cfg, "clip");
  const auto epochs = get<std::size_t>(cfg, "epochs");
  const auto batch = get<std::size_t>(cfg, "batch");
  const auto chunk = get<std::size_t>(cfg, "chunk");
  const auto threads = get<std::size_t>(cfg, "threads");
  const bool wall = get<bool>(cfg, "wall_clock");
  if (batch == 0 || chunk == 0) throw ConfigError("batch and chunk must be positive");
  optim::RegularizerConfig reg;
  reg.w_reg = get<double>(cfg, "w_reg");
  reg.w_v = get<double>(cfg, "w_v");
  const SampleModel model{p, ro, std::exp(-1.0 / get<double>(cfg, "tau_kappa")), reg};

  log << "sMNIST " << train.rows << "x" << train.cols << ": " << train.size() << " train, " << test.size()
      << " test, n=" << n << '\n';
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t epoch = 1; epoch <= epochs; ++epoch) {
    const auto te = Clock::now();
    std::mt19937_64 rng(seed * 1000003ULL + epoch);
    std::shuffle(order.begin(), order.end(), rng);
    double train_loss = 0.0;
    std::size_t train_correct = 0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t stop = std::min(order.size(), start + batch);
      const std::size_t chunks = (stop - start + chunk - 1) / chunk;
      auto parts = parallel_map<ChunkResult>(chunks, threads, [&](std::size_t c) {
        ChunkResult r = empty_chunk(p, ro, true);
        for (std::size_t k = start + c * chunk; k < std::min(stop, start + (c + 1) * chunk); ++k) {
          smnist_sample(model, train.images.row(order[k]), train.labels[order[k]], r, true);
        }
        return r;
      });
      Gradients g = Gradients::zeros_like(p);
      ReadoutGradients rg = ReadoutGradients::zeros_like(ro);
      double batch_loss = 0.0;
      for (const auto& r : parts) {
        g += r.grads;
        rg += r.readout_grads;
        batch_loss += r.loss;
        train_correct += r.correct;
      }
      train_loss += batch_loss;
      const double inv = 1.0 / static_cast<double>(stop - start);
      g.scale(inv);
      for (auto& x : rg.dW.data()) x *= inv;
      for (auto& x : rg.db) x *= inv;
      const double norm = optim::clip_global_norm(g, clip, &rg);
      if (!std::isfinite(batch_loss) || !std::isfinite(norm)) {
        std::ostringstream msg;
        msg << "sMNIST diverged in epoch " << epoch << " at sample " << start << ": batch loss " << batch_loss
            << ", gradient norm " << norm;
        throw DivergenceError(msg.str());
      }
      optim::adam_step(p, g, adam, &ro, &rg);
    }
    train_loss /= static_cast<double>(order.size());

    const auto eval = smnist_evaluate(model, test, chunk, threads);
    const auto report = metrics::effective_mac_report(eval.meter);
    metrics::MetricsRow row;
    row.epoch = epoch;
    row.train_loss = train_loss;
    row.val_metric = eval.accuracy;
    row.alpha = report.alpha;
    row.beta = report.beta;
    row.effective_mac = report.effective_total;
    row.dense_mac = report.dense_total;
    row.wall_seconds = wall ? seconds_since(te) : 0.0;
    csv.write(row);
    save_checkpoint(sum.dir / "checkpoint", p, &ro);
    log << "epoch " << epoch << " train loss " << train_loss << " train acc "
        << static_cast<double>(train_correct) / static_cast<double>(order.size()) << " test acc " << eval.accuracy
        << " alpha " << report.alpha << " beta " << report.beta << " MAC ratio " << report.total_ratio << " ("
        << fixed(seconds_since(te), 1) << " s)" << std::endl;
    sum.epochs = epoch;
    sum.train_loss = train_loss;
    sum.test_accuracy = eval.accuracy;
    sum.test_report = report;
  }
  sum.seconds = seconds_since(t0);
  return sum;
}

SmnistEval evaluate_smnist_checkpoint(const fs::path& checkpoint, const Json& cfg) {
  Readout ro;
  const LayerParams p = load_checkpoint(checkpoint, &ro);
  const auto test = load_split(get<std::string>(cfg, "data_dir"), "t10k", get<std::size_t>(cfg, "pool"),
                               get<std::size_t>(cfg, "test_limit"));
  const SampleModel model{p, ro, std::exp(-1.0 / get<double>(cfg, "tau_kappa")), {}};
  const auto eval = smnist_evaluate(model, test, get<std::size_t>(cfg, "chunk"), get<std::size_t>(cfg, "threads"));
  return {eval.accuracy, metrics::effective_mac_report(eval.meter)};
}

// ---------------------------------------------------------------- dt vs ct

CompareSummary run_compare_dt_ct(const Json& cfg, std::ostream& log) {
  const auto n = get<std::size_t>(cfg, "n");
  const auto d = get<std::size_t>(cfg, "d");
  const double T = get<double>(cfg, "T");
  const auto dts = get<std::vector<double>>(cfg, "dts");
  if (dts.empty()) throw ConfigError("dts must not be empty");
  ParamConfig pc;
  pc.tau_s = get<double>(cfg, "tau_s");
  pc.tau_m = get<double>(cfg, "tau_m");
  pc.theta_transform = ThresholdTransform::abs;
  LayerParams p = init_params(n, d, get<std::uint64_t>(cfg, "seed"), pc);
  // c stays inside (-1, 1), so these thresholds are never reached.
  for (auto& t : p.theta_raw) t = 1e6;

  std::vector<continuous::InputEvent> inputs;
  if (get<bool>(cfg, "zero_input")) {
    for (auto& b : p.b) std::fill(b.begin(), b.end(), 0.0);
  } else {
    const double a = get<double>(cfg, "input_scale");
    inputs = {{0.4, 0, a}, {1.6, d > 1 ? 1u : 0u, -a}, {2.0, 0, 0.5 * a}};
  }

  // Reference: fine RK4 flow read out on the finest grid.
  const double finest = *std::min_element(dts.begin(), dts.end());
  const auto K = static_cast<std::size_t>(std::llround(T / finest));
  continuous::SimConfig sim;
  sim.integ.max_step = get<double>(cfg, "reference_step");
  for (std::size_t k = 0; k <= K; ++k) sim.readout_times.push_back(static_cast<double>(k) * finest);
  const auto ref = continuous::simulate(p, inputs, sim.readout_times.back(), sim);

  CompareSummary sum;
  sum.events_free = ref.internal_event_count() == 0;
  for (const auto& r : ref.readouts) {
    for (double c : r.c) sum.c_inf = std::max(sum.c_inf, std::abs(c));
  }

  // Forward Euler of tau_m dc/dt = u (z - c): a GRU step with update gate
  // (dt / tau_m) u. Activations follow their exact event-free decay.
  for (double dt : dts) {
    const auto stride = static_cast<std::size_t>(std::llround(dt / finest));
    if (std::abs(static_cast<double>(stride) * finest - dt) > 1e-12) {
      throw ConfigError("each dt must be an integer multiple of the smallest one");
    }
    auto s = continuous::HybridState::zeros(n);
    std::size_t next_input = 0;
    double err = 0.0;
    for (std::size_t k = 0; k * stride <= K; ++k) {
      const double t = static_cast<double>(k) * dt;
      const auto& c_ref = ref.readouts[k * stride].c;
      for (std::size_t i = 0; i < n; ++i) err = std::max(err, std::abs(s.c[i] - c_ref[i]));
      if (k * stride == K) break;
      while (next_input < inputs.size() && inputs[next_input].s < t + 0.5 * dt) {
        s = continuous::apply_input_event(s, inputs[next_input].channel, inputs[next_input].value, p);
        ++next_input;
      }
      for (std::size_t i = 0; i < n; ++i) {
        const double u = sigmoid(s.a[kUpdate][i]);
        const double z = std::tanh(s.a[kCandidate][i]);
        const double ut = dt / pc.tau_m * u;
        s.c[i] = ut * z + (1.0 - ut) * s.c[i];
      }
      s = continuous::decay_activations(s, dt, p);
    }
    sum.levels.push_back({dt, err});
  }
  std::sort(sum.levels.begin(), sum.levels.end(), [](auto& a, auto& b) { return a.dt > b.dt; });
  for (std::size_t k = 1; k < sum.levels.size(); ++k) {
    sum.ratios.push_back(sum.levels[k].max_error > 0 ? sum.levels[k - 1].max_error / sum.levels[k].max_error : 0.0);
  }
  if (sum.levels.size() >= 2 && sum.levels.back().max_error > 0) {
    double mx = 0, my = 0;
    for (const auto& l : sum.levels) {
      mx += std::log(l.dt);
      my += std::log(l.max_error);
    }
    mx /= static_cast<double>(sum.levels.size());
    my /= static_cast<double>(sum.levels.size());
    double sxy = 0, sxx = 0;
    for (const auto& l : sum.levels) {
      sxy += (std::log(l.dt) - mx) * (std::log(l.max_error) - my);
      sxx += (std::log(l.dt) - mx) * (std::log(l.dt) - mx);
    }
    sum.order = sxy / sxx;
  }
  log << "max |c| of the reference: " << sum.c_inf << (sum.events_free ? "" : "  (WARNING: events occurred)") << '\n';
  for (const auto& l : sum.levels) log << "dt " << l.dt << "  max |c_dt - c_ct| " << l.max_error << '\n';
  for (double r : sum.ratios) log << "error ratio per halving " << r << '\n';
  log << "empirical order " << sum.order << '\n';
  return sum;
}

// ---------------------------------------------------------------- sparsity bench

BenchSummary run_bench_sparsity(const Json& cfg, std::ostream& log) {
  const auto seed = get<std::uint64_t>(cfg, "seed");
  const auto ckpt = get<std::string>(cfg, "checkpoint");
  const auto dataset = get<std::string>(cfg, "dataset");
  const auto limit = get<std::size_t>(cfg, "limit");

  Mat inputs_all;
  std::size_t steps = 0, d = 0, count = 0;
  if (dataset == "smnist") {
    const auto set = load_split(get<std::string>(cfg, "data_dir"), "t10k", get<std::size_t>(cfg, "pool"), limit);
    inputs_all = set.images;
    steps = set.rows * set.cols;
    d = 1;
    count = set.size();
  } else if (dataset == "random") {
    steps = get<std::size_t>(cfg, "random_steps");
    d = get<std::size_t>(cfg, "random_d");
    count = limit;
    const double density = get<double>(cfg, "random_density");
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    inputs_all = Mat(count, steps * d);
    for (auto& x : inputs_all.data()) x = unif(rng) < density ? unif(rng) : 0.0;
  } else {
    throw ConfigError("dataset must be 'smnist' or 'random'");
  }

  LayerParams p;
  if (!ckpt.empty()) {
    p = load_checkpoint(ckpt);
  } else {
    const ParamConfig pc = param_config(cfg);
    p = init_params(get<std::size_t>(cfg, "n"), d, seed, pc);
    if (!cfg.at("theta").is_null()) {
      // Large thresholds need the abs transform; sigmoid thresholds stay below 1.
      const double theta = get<double>(cfg, "theta");
      if (pc.theta_transform == ThresholdTransform::sigmoid && theta >= 1.0) {
        p.config.theta_transform = ThresholdTransform::abs;
      }
      for (auto& t : p.theta_raw) t = raw_for_threshold(p.config, theta);
    }
  }
  if (p.d != d) throw DimensionError("checkpoint input size does not match the dataset");

  auto parts = parallel_map<metrics::SparsityMeter>(count, get<std::size_t>(cfg, "threads"), [&](std::size_t k) {
    metrics::SparsityMeter m(p.n, p.d);
    const auto row = inputs_all.row(k);
    const Mat x(steps, d, Vec(row.begin(), row.end()));
    OpCounter fwd, rec;
    const auto trace = discrete::egru_forward(p, x, fwd, {}, &rec);
    m.add(trace, p, fwd, rec);
    return m;
  });
  metrics::SparsityMeter total(p.n, p.d);
  for (const auto& m : parts) total += m;

  BenchSummary sum;
  sum.sequences = count;
  sum.report = metrics::effective_mac_report(total);
  const auto& r = sum.report;
  log << "sequences " << count << ", n " << p.n << ", T " << steps << '\n'
      << "alpha " << r.alpha << "  beta " << r.beta << '\n'
      << "recurrent MAC: dense " << r.dense_recurrent << "  effective " << r.effective_recurrent << "  ratio "
      << r.recurrent_ratio << '\n'
      << "input MAC:     dense " << r.dense_input << "  effective " << r.effective_input << '\n'
      << "total MAC:     dense " << r.dense_total << "  effective " << r.effective_total << "  ratio " << r.total_ratio
      << '\n'
      << "pointwise ops  " << r.pointwise << '\n';

  const fs::path dir = prepare_run_dir(cfg);
  Json out = {{"sequences", count},
              {"alpha", r.alpha},
              {"beta", r.beta},
              {"dense_recurrent", r.dense_recurrent},
              {"dense_input", r.dense_input},
              {"effective_recurrent", r.effective_recurrent},
              {"effective_input", r.effective_input},
              {"recurrent_ratio", r.recurrent_ratio},
              {"total_ratio", r.total_ratio},
              {"pointwise", r.pointwise}};
  std::ofstream(dir / "report.json") << out.dump(2) << '\n';
  return sum;
}

int run_command(const std::string& command, const Json& cfg, std::ostream& log) {
  if (command == "gradcheck") return run_gradcheck(cfg, log).passed ? 0 : 1;
  if (command == "train_delay_copy") {
    run_train_delay_copy(cfg, log);
    return 0;
  }
  if (command == "train_smnist") {
    const auto s = run_train_smnist(cfg, log);
    log << "final test accuracy " << s.test_accuracy << ", alpha " << s.test_report.alpha << '\n';
    return 0;
  }
  if (command == "compare_dt_ct") {
    const auto s = run_compare_dt_ct(cfg, log);
    return s.events_free ? 0 : 1;
  }
  if (command == "bench_sparsity") {
    run_bench_sparsity(cfg, log);
    return 0;
  }
  throw ConfigError("unknown command '" + command + "'");
}

}  // namespace egru::app
