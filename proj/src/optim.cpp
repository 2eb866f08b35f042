#include "egru/optim.hpp"

#include <algorithm>
#include <cmath>

namespace egru::optim {

void adam_step(std::vector<std::span<double>> params, std::vector<std::span<const double>> grads, AdamState& s) {
  if (params.size() != grads.size()) throw DimensionError("adam_step: block count mismatch");
  if (s.m.empty()) {
    for (const auto& p : params) {
      s.m.emplace_back(p.size(), 0.0);
      s.v.emplace_back(p.size(), 0.0);
    }
  }
  if (s.m.size() != params.size()) throw DimensionError("adam_step: optimizer state has a different layout");
  const auto& c = s.config;
  ++s.step;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(s.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(s.step));
  for (std::size_t b = 0; b < params.size(); ++b) {
    if (params[b].size() != grads[b].size() || s.m[b].size() != params[b].size()) {
      throw DimensionError("adam_step: block shape mismatch");
    }
    for (std::size_t i = 0; i < params[b].size(); ++i) {
      const double g = grads[b][i] + c.weight_decay * params[b][i];
      s.m[b][i] = c.beta1 * s.m[b][i] + (1.0 - c.beta1) * g;
      s.v[b][i] = c.beta2 * s.v[b][i] + (1.0 - c.beta2) * g * g;
      const double mhat = s.m[b][i] / bc1;
      const double vhat = s.v[b][i] / bc2;
      params[b][i] -= c.lr * mhat / (std::sqrt(vhat) + c.eps);
    }
  }
}

void adam_step(LayerParams& p, const Gradients& g, AdamState& s, Readout* readout,
               const ReadoutGradients* readout_grads) {
  auto pb = param_blocks(p);
  auto gb = grad_blocks(g);
  if (readout != nullptr && readout_grads != nullptr) {
    pb.emplace_back(readout->W.data());
    pb.emplace_back(readout->b);
    gb.emplace_back(readout_grads->dW.data());
    gb.emplace_back(readout_grads->db);
  }
  adam_step(std::move(pb), std::move(gb), s);
  enforce_threshold_positivity(p);
}

double clip_global_norm(std::vector<std::span<double>> grads, double max_norm) {
  if (!(max_norm > 0.0)) throw std::invalid_argument("clip_global_norm: max_norm must be positive");
  double sq = 0.0;
  for (const auto& b : grads) {
    for (double x : b) sq += x * x;
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double f = max_norm / norm;
    for (auto& b : grads) {
      for (auto& x : b) x *= f;
    }
  }
  return norm;
}

double clip_global_norm(Gradients& g, double max_norm, ReadoutGradients* readout) {
  auto blocks = grad_blocks(g);
  if (readout != nullptr) {
    blocks.emplace_back(readout->dW.data());
    blocks.emplace_back(readout->db);
  }
  return clip_global_norm(std::move(blocks), max_norm);
}

Mat exp_trace(const Mat& y, double tau_kappa) {
  if (!(tau_kappa > 0.0)) throw std::invalid_argument("exp_trace: tau_kappa must be positive");
  const double k = std::exp(-1.0 / tau_kappa);
  Mat tr(y.rows(), y.cols());
  for (std::size_t t = 0; t < y.rows(); ++t) {
    for (std::size_t i = 0; i < y.cols(); ++i) tr(t, i) = (t ? k * tr(t - 1, i) : 0.0) + y(t, i);
  }
  return tr;
}

double exp_trace_at(std::span<const TraceEvent> events, double tau_kappa, double t) {
  if (!(tau_kappa > 0.0)) throw std::invalid_argument("exp_trace_at: tau_kappa must be positive");
  double acc = 0.0;
  for (const auto& e : events) {
    if (e.s <= t) acc += e.amplitude * std::exp(-(t - e.s) / tau_kappa);
  }
  return acc;
}

LossGrad bce_with_logits(std::span<const double> logits, std::span<const double> targets) {
  if (logits.size() != targets.size()) throw DimensionError("bce_with_logits: length mismatch");
  LossGrad out{0.0, Vec(logits.size())};
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double x = logits[i], y = targets[i];
    out.loss += std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x)));
    out.grad[i] = sigmoid(x) - y;
  }
  return out;
}

LossGrad cross_entropy_softmax(std::span<const double> logits, std::size_t label) {
  if (label >= logits.size()) throw std::out_of_range("cross_entropy_softmax: label out of range");
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double x : logits) z += std::exp(x - mx);
  const double lse = mx + std::log(z);
  LossGrad out{lse - logits[label], Vec(logits.size())};
  for (std::size_t i = 0; i < logits.size(); ++i) out.grad[i] = std::exp(logits[i] - lse) - (i == label ? 1.0 : 0.0);
  return out;
}

RegularizerResult sparsity_regularizers(const discrete::DiscreteTrace& trace, const LayerParams& p,
                                        const RegularizerConfig& cfg) {
  const std::size_t T = trace.steps(), n = trace.units();
  if (T == 0 || n != p.n) throw DimensionError("sparsity_regularizers: trace does not match the layer");
  const double inv = 1.0 / static_cast<double>(T * n);
  const Vec theta = p.thresholds();
  RegularizerResult r;
  r.dL_dc = Mat(T, n);
  r.dL_dtheta.assign(n, 0.0);
  double events = 0.0, csum = 0.0;
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t i = 0; i < n; ++i) {
      const double c = trace.c(t, i);
      events += trace.fired_at(t, i) ? 1.0 : 0.0;
      csum += c - (theta[i] - cfg.act_offset);
      const double pd = discrete::pseudo_derivative(c, theta[i], p.config.epsilon, p.config.pd_peak);
      r.dL_dc(t, i) = cfg.w_reg * inv * pd + cfg.w_v * inv;
      r.dL_dtheta[i] -= cfg.w_reg * inv * pd;
    }
  }
  r.l_reg = cfg.w_reg * (events * inv - cfg.target_rate);
  r.l_act = cfg.w_v * csum * inv;
  return r;
}

}  // namespace egru::optim
