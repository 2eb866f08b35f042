#include "egru/params.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include "json.hpp"

namespace egru {

namespace {

void fill_uniform(std::span<double> out, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& x : out) {
    x = dist(rng);
  }
}

Mat xavier(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
  Mat m(rows, cols);
  fill_uniform(m.data(), std::sqrt(6.0 / static_cast<double>(rows + cols)), rng);
  return m;
}

void require_shape(const Mat& m, std::size_t r, std::size_t c, const std::string& name) {
  if (m.rows() != r || m.cols() != c) {
    throw DimensionError(name + ": expected " + std::to_string(r) + "x" + std::to_string(c) + ", got " +
                         std::to_string(m.rows()) + "x" + std::to_string(m.cols()));
  }
}

}  // namespace

double apply_threshold_transform(ThresholdTransform t, double raw, double abs_floor) {
  switch (t) {
    case ThresholdTransform::sigmoid:
      return sigmoid(raw);
    case ThresholdTransform::abs:
      return std::max(std::abs(raw), abs_floor);
  }
  return raw;
}

double LayerParams::threshold(std::size_t i) const {
  return apply_threshold_transform(config.theta_transform, theta_raw[raw_index(i)], config.abs_floor);
}

Vec LayerParams::thresholds() const {
  Vec out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = threshold(i);
  }
  return out;
}

double LayerParams::threshold_slope(std::size_t i) const {
  const double raw = theta_raw[raw_index(i)];
  switch (config.theta_transform) {
    case ThresholdTransform::sigmoid:
      return sigmoid_prime(raw);
    case ThresholdTransform::abs:
      if (std::abs(raw) < config.abs_floor) {
        return 0.0;
      }
      return raw < 0.0 ? -1.0 : 1.0;
  }
  return 1.0;
}

std::size_t LayerParams::num_trainable() const {
  return kNumGates * (n * n + n * d + n) + theta_raw.size();
}

void LayerParams::validate() const {
  if (n == 0 || d == 0) {
    throw DimensionError("LayerParams: n and d must be >= 1");
  }
  for (std::size_t g = 0; g < kNumGates; ++g) {
    const std::string name = kGateNames[g];
    require_shape(V[g], n, n, "V_" + name);
    require_shape(U[g], n, d, "U_" + name);
    if (b[g].size() != n) {
      throw DimensionError("b_" + name + ": expected length " + std::to_string(n));
    }
  }
  const std::size_t expect = config.theta_mode == ThresholdMode::scalar ? 1 : n;
  if (theta_raw.size() != expect) {
    throw DimensionError("theta: expected " + std::to_string(expect) + " raw entries");
  }
  if (!(config.tau_s > 0.0 && config.tau_m > 0.0 && config.epsilon > 0.0)) {
    throw std::invalid_argument("LayerParams: tau_s, tau_m and epsilon must be positive");
  }
}

LayerParams init_params(std::size_t n, std::size_t d, std::uint64_t seed, const ParamConfig& config) {
  if (n == 0 || d == 0) {
    throw DimensionError("init_params: n and d must be >= 1");
  }
  LayerParams p;
  p.n = n;
  p.d = d;
  p.config = config;
  p.seed = seed;
  std::mt19937_64 rng(seed);
  for (std::size_t g = 0; g < kNumGates; ++g) {
    p.U[g] = xavier(n, d, rng);
    p.V[g] = xavier(n, n, rng);
    p.b[g] = Vec(n);
    fill_uniform(p.b[g], 1.0 / std::sqrt(static_cast<double>(n)), rng);
  }
  std::normal_distribution<double> normal(0.0, config.theta_std);
  p.theta_raw = Vec(config.theta_mode == ThresholdMode::scalar ? 1 : n);
  for (auto& t : p.theta_raw) {
    t = normal(rng);
  }
  enforce_threshold_positivity(p);
  p.validate();
  return p;
}

void enforce_threshold_positivity(LayerParams& p) {
  if (p.config.theta_transform != ThresholdTransform::abs) {
    return;
  }
  for (auto& t : p.theta_raw) {
    t = std::max(std::abs(t), p.config.abs_floor);
  }
}

Gradients Gradients::zeros_like(const LayerParams& p) {
  Gradients g;
  for (std::size_t k = 0; k < kNumGates; ++k) {
    g.dV[k] = Mat(p.n, p.n);
    g.dU[k] = Mat(p.n, p.d);
    g.db[k] = Vec(p.n, 0.0);
  }
  g.dtheta_raw = Vec(p.theta_raw.size(), 0.0);
  return g;
}

Gradients& Gradients::operator+=(const Gradients& o) {
  auto dst = grad_blocks(*this);
  const auto src = grad_blocks(o);
  if (dst.size() != src.size()) {
    throw DimensionError("Gradients: block count mismatch");
  }
  for (std::size_t i = 0; i < dst.size(); ++i) {
    if (dst[i].size() != src[i].size()) {
      throw DimensionError("Gradients: block shape mismatch");
    }
    for (std::size_t j = 0; j < dst[i].size(); ++j) {
      dst[i][j] += src[i][j];
    }
  }
  return *this;
}

void Gradients::scale(double s) {
  for (auto blk : grad_blocks(*this)) {
    for (auto& x : blk) {
      x *= s;
    }
  }
}

double Gradients::squared_norm() const {
  double acc = 0.0;
  for (auto blk : grad_blocks(*this)) {
    for (double x : blk) {
      acc += x * x;
    }
  }
  return acc;
}

std::vector<std::span<double>> param_blocks(LayerParams& p) {
  std::vector<std::span<double>> out;
  for (auto& m : p.V) out.emplace_back(m.data());
  for (auto& m : p.U) out.emplace_back(m.data());
  for (auto& v : p.b) out.emplace_back(v);
  out.emplace_back(p.theta_raw);
  return out;
}

std::vector<std::span<double>> grad_blocks(Gradients& g) {
  std::vector<std::span<double>> out;
  for (auto& m : g.dV) out.emplace_back(m.data());
  for (auto& m : g.dU) out.emplace_back(m.data());
  for (auto& v : g.db) out.emplace_back(v);
  out.emplace_back(g.dtheta_raw);
  return out;
}

std::vector<std::span<const double>> grad_blocks(const Gradients& g) {
  std::vector<std::span<const double>> out;
  for (const auto& m : g.dV) out.emplace_back(m.data());
  for (const auto& m : g.dU) out.emplace_back(m.data());
  for (const auto& v : g.db) out.emplace_back(v);
  out.emplace_back(g.dtheta_raw);
  return out;
}

Readout Readout::init(std::size_t outputs, std::size_t inputs, std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  Readout r;
  r.W = xavier(outputs, inputs, rng);
  r.b = Vec(outputs);
  fill_uniform(r.b, 1.0 / std::sqrt(static_cast<double>(inputs)), rng);
  return r;
}

ReadoutGradients ReadoutGradients::zeros_like(const Readout& r) {
  return {Mat(r.W.rows(), r.W.cols()), Vec(r.b.size(), 0.0)};
}

ReadoutGradients& ReadoutGradients::operator+=(const ReadoutGradients& o) {
  for (std::size_t i = 0; i < dW.size(); ++i) dW.data()[i] += o.dW.data()[i];
  for (std::size_t i = 0; i < db.size(); ++i) db[i] += o.db[i];
  return *this;
}

// ---------------------------------------------------------------------------
// checkpoint

namespace {

using nlohmann::json;

json array_entry(const Mat& m) { return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", m.data()}}; }
json array_entry(const Vec& v) { return {{"rows", v.size()}, {"cols", 1}, {"data", v}}; }

Mat read_mat(const json& arrays, const std::string& name) {
  const auto& e = arrays.at(name);
  return Mat(e.at("rows").get<std::size_t>(), e.at("cols").get<std::size_t>(), e.at("data").get<Vec>());
}
Vec read_vec(const json& arrays, const std::string& name) { return arrays.at(name).at("data").get<Vec>(); }

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const LayerParams& p, const Readout* readout) {
  json arrays;
  for (std::size_t g = 0; g < kNumGates; ++g) {
    const std::string s = kGateNames[g];
    arrays["V_" + s] = array_entry(p.V[g]);
    arrays["U_" + s] = array_entry(p.U[g]);
    arrays["b_" + s] = array_entry(p.b[g]);
  }
  arrays["theta_raw"] = array_entry(p.theta_raw);
  if (readout != nullptr) {
    arrays["readout_W"] = array_entry(readout->W);
    arrays["readout_b"] = array_entry(readout->b);
  }
  const auto& c = p.config;
  json doc = {
      {"format", "egru-checkpoint"},
      {"version", 1},
      {"n", p.n},
      {"d", p.d},
      {"seed", p.seed},
      {"config",
       {{"theta_mode", to_string(c.theta_mode)},
        {"theta_transform", to_string(c.theta_transform)},
        {"reset_mode", to_string(c.reset_mode)},
        {"tau_s", c.tau_s},
        {"tau_m", c.tau_m},
        {"epsilon", c.epsilon},
        {"pd_peak", c.pd_peak},
        {"theta_std", c.theta_std},
        {"abs_floor", c.abs_floor}}},
      {"arrays", arrays},
  };
  std::ofstream out(path);
  if (!out) {
    throw std::runtime_error("cannot write checkpoint " + path.string());
  }
  out << doc.dump(1) << '\n';
}

LayerParams load_checkpoint(const std::filesystem::path& path, Readout* readout) {
  std::ifstream in(path);
  if (!in) {
    throw std::runtime_error("cannot read checkpoint " + path.string());
  }
  const json doc = json::parse(in);
  if (doc.value("format", "") != "egru-checkpoint") {
    throw std::runtime_error(path.string() + ": not an egru checkpoint");
  }
  LayerParams p;
  p.n = doc.at("n").get<std::size_t>();
  p.d = doc.at("d").get<std::size_t>();
  p.seed = doc.at("seed").get<std::uint64_t>();
  const auto& c = doc.at("config");
  p.config.theta_mode = threshold_mode_from_string(c.at("theta_mode"));
  p.config.theta_transform = threshold_transform_from_string(c.at("theta_transform"));
  p.config.reset_mode = reset_mode_from_string(c.at("reset_mode"));
  p.config.tau_s = c.at("tau_s");
  p.config.tau_m = c.at("tau_m");
  p.config.epsilon = c.at("epsilon");
  p.config.pd_peak = c.at("pd_peak");
  p.config.theta_std = c.at("theta_std");
  p.config.abs_floor = c.at("abs_floor");
  const auto& arrays = doc.at("arrays");
  for (std::size_t g = 0; g < kNumGates; ++g) {
    const std::string s = kGateNames[g];
    p.V[g] = read_mat(arrays, "V_" + s);
    p.U[g] = read_mat(arrays, "U_" + s);
    p.b[g] = read_vec(arrays, "b_" + s);
  }
  p.theta_raw = read_vec(arrays, "theta_raw");
  p.validate();
  if (readout != nullptr) {
    if (!arrays.contains("readout_W")) {
      throw std::runtime_error(path.string() + ": checkpoint has no readout");
    }
    readout->W = read_mat(arrays, "readout_W");
    readout->b = read_vec(arrays, "readout_b");
  }
  return p;
}

const char* to_string(ThresholdMode m) { return m == ThresholdMode::scalar ? "scalar" : "per_unit"; }
const char* to_string(ThresholdTransform t) { return t == ThresholdTransform::abs ? "abs" : "sigmoid"; }
const char* to_string(ResetMode m) { return m == ResetMode::hard ? "hard" : "subtract"; }

ThresholdMode threshold_mode_from_string(const std::string& s) {
  if (s == "per_unit") return ThresholdMode::per_unit;
  if (s == "scalar") return ThresholdMode::scalar;
  throw std::invalid_argument("unknown theta_mode '" + s + "'");
}
ThresholdTransform threshold_transform_from_string(const std::string& s) {
  if (s == "sigmoid") return ThresholdTransform::sigmoid;
  if (s == "abs") return ThresholdTransform::abs;
  throw std::invalid_argument("unknown theta_transform '" + s + "'");
}
ResetMode reset_mode_from_string(const std::string& s) {
  if (s == "subtract") return ResetMode::subtract;
  if (s == "hard") return ResetMode::hard;
  throw std::invalid_argument("unknown reset_mode '" + s + "'");
}

}  // namespace egru
