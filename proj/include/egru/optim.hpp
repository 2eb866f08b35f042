#pragma once

#include <span>
#include <vector>

#include "egru/discrete.hpp"
#include "egru/params.hpp"

namespace egru::optim {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// Moment estimates for a fixed list of parameter blocks.
struct AdamState {
  AdamConfig config;
  std::vector<Vec> m, v;
  std::uint64_t step = 0;

  explicit AdamState(const AdamConfig& c = {}) : config(c) {}
};

/// Bias-corrected Adam over matching parameter and gradient blocks. Moment
/// buffers are sized on the first call. Weight decay is L2 added to the
/// gradient.
void adam_step(std::vector<std::span<double>> params, std::vector<std::span<const double>> grads, AdamState& s);

/// Adam over a layer (and optionally its readout), then re-projects the
/// thresholds to be positive.
void adam_step(LayerParams& p, const Gradients& g, AdamState& s, Readout* readout = nullptr,
               const ReadoutGradients* readout_grads = nullptr);

/// Scales every block by max_norm / ||g|| when the global norm exceeds
/// max_norm. Returns the norm before clipping.
double clip_global_norm(std::vector<std::span<double>> grads, double max_norm);
double clip_global_norm(Gradients& g, double max_norm, ReadoutGradients* readout = nullptr);

/// Discrete leaky trace: tr_t = exp(-1/tau) tr_{t-1} + y_t, per column.
Mat exp_trace(const Mat& y, double tau_kappa);

/// Continuous leaky trace sampled at `t`: sum over events with s <= t of
/// amplitude * exp(-(t - s) / tau).
struct TraceEvent {
  double s;
  double amplitude;
};
double exp_trace_at(std::span<const TraceEvent> events, double tau_kappa, double t);

struct LossGrad {
  double loss = 0.0;
  Vec grad;
};

/// Binary cross-entropy on logits, summed over entries.
LossGrad bce_with_logits(std::span<const double> logits, std::span<const double> targets);

/// Softmax cross-entropy for one label.
LossGrad cross_entropy_softmax(std::span<const double> logits, std::size_t label);

struct RegularizerConfig {
  double w_reg = 0.0;
  double w_v = 0.0;
  double target_rate = 0.05;
  double act_offset = 0.05;
};

struct RegularizerResult {
  double l_reg = 0.0;
  double l_act = 0.0;
  Mat dL_dc;         ///< T x n, gradient of both terms w.r.t. c
  Vec dL_dtheta;     ///< n, gradient of l_reg through the threshold
};

/// l_reg = w_reg (mean_{t,i} H(c - theta) - target_rate), differentiated with
/// the pseudo-derivative; l_act = w_v mean_{t,i}(c - (theta - act_offset))
/// with theta held constant.
RegularizerResult sparsity_regularizers(const discrete::DiscreteTrace& trace, const LayerParams& p,
                                        const RegularizerConfig& cfg);

}  // namespace egru::optim
