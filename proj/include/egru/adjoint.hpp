#pragma once

#include <functional>
#include <stdexcept>

#include "egru/continuous.hpp"
#include "egru/params.hpp"

namespace egru::adjoint {

using continuous::EventRecord;
using continuous::FlowSegment;
using continuous::Trajectory;

/// Adjoint variables, scaled so that lambda = -(dL/dstate) / tau for each
/// state's own time constant. They satisfy, in forward time,
///   tau_m dlambda_c/dt   = u * lambda_c
///   tau_s dlambda_a/dt   = lambda_a - (dF/da) * lambda_c,  F = u (z - c)
///   tau_k dlambda_tr/dt  = lambda_tr
/// and are integrated backward from lambda(T) = 0.
struct AdjointState {
  double t = 0.0;
  Vec lambda_c;
  std::array<Vec, kNumGates> lambda_a;
  Vec lambda_tr;

  static AdjointState zeros(std::size_t n, std::size_t traces = 0);
};

/// Loss contribution at one readout time. `fn` returns the loss value and
/// writes dl/dc (length n) and dl/dtr (length J) into the given vectors,
/// which arrive zero-filled.
struct ReadoutLoss {
  double t = 0.0;
  std::function<double(const Vec& c, const Vec& tr, Vec& dl_dc, Vec& dl_dtr)> fn;
};

struct LossSpec {
  std::vector<ReadoutLoss> readouts;
};

struct BackwardOptions {
  double grazing_floor = 1e-6;  ///< relative floor on |dc_n/dt| at an event, in units of theta_n / tau_m
  std::size_t substeps = 1;     ///< RK4 steps per stored flow segment
  bool flip_update_xi_sign = false;  ///< test fixture: corrupts the u-gate event gradient
};

/// Thrown when an event crosses its threshold with (near) zero velocity, where
/// the event time is not differentiable.
class GrazingEventError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Integrates the adjoint backward across one event-free segment, from
/// adj.t == seg.t1 to seg.t0. If `bias_integral` is given, the integral of
/// lambda_a over the segment is added to it.
AdjointState adjoint_flow(const AdjointState& adj, const FlowSegment& seg, const LayerParams& p, double tau_kappa,
                          std::array<Vec, kNumGates>* bias_integral = nullptr, std::size_t substeps = 1);

/// Maps post-event adjoints to pre-event adjoints at an internal event.
/// `loss_jump` is l^+ - l^- for integral-type losses (0 for readout losses).
AdjointState adjoint_event_transition(const AdjointState& adj, const EventRecord& rec, const LayerParams& p,
                                      const Mat& output_map, double loss_jump = 0.0,
                                      const BackwardOptions& opt = {});

/// dV_x[m, n] += -tau_s * r_x * c_n^- * lambda_{a_x, m}^+ for the firing unit n
/// (row = receiving unit, column = firing unit; r_x = 1 for u and r).
void accumulate_event_gradients(const EventRecord& rec, const AdjointState& adj_plus, Gradients& grads,
                                const LayerParams& p, const BackwardOptions& opt = {});

/// db_x += integral of lambda_{a_x} over [0, T].
void accumulate_bias_gradients(const std::array<Vec, kNumGates>& integral, Gradients& grads);

/// dU_x[l, i] += -tau_s * lambda_{a_x, l}(s^+) * x for an input event on channel i.
void accumulate_input_gradients(const EventRecord& rec, const AdjointState& adj_plus, Gradients& grads,
                                const LayerParams& p);

struct BackwardResult {
  Gradients grads;
  double loss = 0.0;
  AdjointState initial;  ///< adjoint at t = 0
};

/// Full backward pass. Readouts in `loss` pair up, in order, with the
/// trajectory's readout records and must carry the same times.
BackwardResult backward(const Trajectory& traj, const LossSpec& loss, const LayerParams& p,
                        const BackwardOptions& opt = {});

/// Loss value only, for finite differences.
double evaluate_loss(const Trajectory& traj, const LossSpec& loss);

}  // namespace egru::adjoint
