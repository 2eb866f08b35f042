#include "egru/adjoint.hpp"

#include <cmath>
#include <sstream>

namespace egru::adjoint {

using continuous::EventKind;
using continuous::StepKind;

AdjointState AdjointState::zeros(std::size_t n, std::size_t traces) {
  AdjointState a;
  a.lambda_c.assign(n, 0.0);
  for (auto& l : a.lambda_a) l.assign(n, 0.0);
  a.lambda_tr.assign(traces, 0.0);
  return a;
}

namespace {

// Augmented backward state: lambda_c, lambda_a (3 gates), and running
// integrals of lambda_a for the bias gradient.
struct Aug {
  Vec c;
  std::array<Vec, kNumGates> a;
  std::array<Vec, kNumGates> q;
};

Aug axpy(const Aug& y, double h, const Aug& k) {
  Aug out = y;
  for (std::size_t i = 0; i < y.c.size(); ++i) out.c[i] += h * k.c[i];
  for (std::size_t g = 0; g < kNumGates; ++g) {
    for (std::size_t i = 0; i < y.c.size(); ++i) {
      out.a[g][i] += h * k.a[g][i];
      out.q[g][i] += h * k.q[g][i];
    }
  }
  return out;
}

Aug rhs(const Aug& y, const FlowSegment& seg, double t, const LayerParams& p) {
  const auto a = continuous::segment_a(seg, t, p);
  const Vec c = continuous::segment_c(seg, t);
  const double tm = p.config.tau_m, ts = p.config.tau_s;
  Aug k = y;
  for (std::size_t i = 0; i < p.n; ++i) {
    const double u = sigmoid(a[kUpdate][i]);
    const double z = std::tanh(a[kCandidate][i]);
    const double dF_dau = sigmoid_prime(a[kUpdate][i]) * (z - c[i]);
    const double dF_daz = u * (1.0 - z * z);
    k.c[i] = u * y.c[i] / tm;
    k.a[kUpdate][i] = (y.a[kUpdate][i] - dF_dau * y.c[i]) / ts;
    k.a[kReset][i] = y.a[kReset][i] / ts;
    k.a[kCandidate][i] = (y.a[kCandidate][i] - dF_daz * y.c[i]) / ts;
    for (std::size_t g = 0; g < kNumGates; ++g) k.q[g][i] = y.a[g][i];
  }
  return k;
}

}  // namespace

AdjointState adjoint_flow(const AdjointState& adj, const FlowSegment& seg, const LayerParams& p, double tau_kappa,
                          std::array<Vec, kNumGates>* bias_integral, std::size_t substeps) {
  if (adj.lambda_c.size() != p.n) throw DimensionError("adjoint_flow: state does not match layer size");
  if (seg.c0.size() != p.n) throw std::invalid_argument("adjoint_flow: segment carries no checkpoint data");
  if (substeps == 0) throw std::invalid_argument("adjoint_flow: substeps must be >= 1");
  Aug y{adj.lambda_c, adj.lambda_a, {}};
  for (auto& q : y.q) q.assign(p.n, 0.0);
  const double h = -(seg.t1 - seg.t0) / static_cast<double>(substeps);
  double t = seg.t1;
  for (std::size_t s = 0; s < substeps; ++s) {
    const Aug k1 = rhs(y, seg, t, p);
    const Aug k2 = rhs(axpy(y, 0.5 * h, k1), seg, t + 0.5 * h, p);
    const Aug k3 = rhs(axpy(y, 0.5 * h, k2), seg, t + 0.5 * h, p);
    const Aug k4 = rhs(axpy(y, h, k3), seg, t + h, p);
    Aug next = y;
    next = axpy(next, h / 6.0, k1);
    next = axpy(next, h / 3.0, k2);
    next = axpy(next, h / 3.0, k3);
    next = axpy(next, h / 6.0, k4);
    y = std::move(next);
    t += h;
  }
  AdjointState out;
  out.t = seg.t0;
  out.lambda_c = std::move(y.c);
  out.lambda_a = std::move(y.a);
  out.lambda_tr = adj.lambda_tr;
  const double decay = std::exp(-(seg.t1 - seg.t0) / tau_kappa);
  for (auto& l : out.lambda_tr) l *= decay;
  if (bias_integral != nullptr) {
    // q ran from 0 at t1 down to -(integral) at t0
    for (std::size_t g = 0; g < kNumGates; ++g) {
      for (std::size_t i = 0; i < p.n; ++i) (*bias_integral)[g][i] -= y.q[g][i];
    }
  }
  return out;
}

AdjointState adjoint_event_transition(const AdjointState& adj, const EventRecord& rec, const LayerParams& p,
                                      const Mat& output_map, double loss_jump, const BackwardOptions& opt) {
  if (rec.event.kind != EventKind::internal) return adj;
  const std::size_t n = rec.event.unit;
  const double tm = p.config.tau_m, ts = p.config.tau_s;
  const double theta_n = p.threshold(n);
  const double cdot_n = rec.cdot_minus[n];
  if (std::abs(cdot_n) < opt.grazing_floor * theta_n / tm) {
    std::ostringstream msg;
    msg << "grazing event: unit " << n << " at s=" << rec.event.s << " crosses its threshold with dc/dt=" << cdot_n;
    throw GrazingEventError(msg.str());
  }
  const double cn = rec.c_minus[n];
  AdjointState out = adj;

  double coupled_z = 0.0, coupled_u = 0.0, coupled_r = 0.0, recover = 0.0;
  for (std::size_t m = 0; m < p.n; ++m) {
    if (m == n) continue;
    coupled_u += p.V[kUpdate](m, n) * adj.lambda_a[kUpdate][m];
    coupled_r += p.V[kReset](m, n) * adj.lambda_a[kReset][m];
    coupled_z += p.V[kCandidate](m, n) * adj.lambda_a[kCandidate][m];
    recover += adj.lambda_c[m] * (rec.cdot_plus[m] - rec.cdot_minus[m]);
  }
  // The reset gate of the firing unit scales its own candidate-gate jump.
  const double ar = rec.a_minus[kReset][n];
  out.lambda_a[kReset][n] += cn * sigmoid_prime(ar) * coupled_z;

  const double r_n = rec.r_minus[n], rdot_n = rec.rdot_minus[n];
  const double gate_sum = (1.0 / ts) * (coupled_u + coupled_r) + (rdot_n + r_n / ts) * coupled_z;
  double trace_term = 0.0;
  for (std::size_t j = 0; j < output_map.rows(); ++j) trace_term += output_map(j, n) * adj.lambda_tr[j];

  const double rhs = tm * rec.cdot_plus[n] * adj.lambda_c[n] + tm * recover - ts * cn * gate_sum - cn * trace_term -
                     loss_jump;
  out.lambda_c[n] = rhs / (tm * cdot_n);
  return out;
}

void accumulate_event_gradients(const EventRecord& rec, const AdjointState& adj_plus, Gradients& grads,
                                const LayerParams& p, const BackwardOptions& opt) {
  if (rec.event.kind != EventKind::internal) return;
  const std::size_t n = rec.event.unit;
  const double ts = p.config.tau_s;
  const double cn = rec.c_minus[n];
  const double r_n = rec.r_minus[n];
  const double sign_u = opt.flip_update_xi_sign ? -1.0 : 1.0;
  for (std::size_t m = 0; m < p.n; ++m) {
    if (m == n) continue;
    grads.dV[kUpdate](m, n) += sign_u * -ts * cn * adj_plus.lambda_a[kUpdate][m];
    grads.dV[kReset](m, n) += -ts * cn * adj_plus.lambda_a[kReset][m];
    grads.dV[kCandidate](m, n) += -ts * r_n * cn * adj_plus.lambda_a[kCandidate][m];
  }
}

void accumulate_bias_gradients(const std::array<Vec, kNumGates>& integral, Gradients& grads) {
  for (std::size_t g = 0; g < kNumGates; ++g) {
    if (integral[g].size() != grads.db[g].size()) throw DimensionError("bias integral has the wrong length");
    for (std::size_t i = 0; i < integral[g].size(); ++i) grads.db[g][i] += integral[g][i];
  }
}

void accumulate_input_gradients(const EventRecord& rec, const AdjointState& adj_plus, Gradients& grads,
                                const LayerParams& p) {
  if (rec.event.kind != EventKind::input) return;
  const std::size_t i = rec.event.unit;
  const double x = rec.event.value;
  const double ts = p.config.tau_s;
  for (std::size_t g = 0; g < kNumGates; ++g) {
    for (std::size_t l = 0; l < p.n; ++l) grads.dU[g](l, i) += -ts * adj_plus.lambda_a[g][l] * x;
  }
}

namespace {

void check_loss_spec(const Trajectory& traj, const LossSpec& loss) {
  if (loss.readouts.size() != traj.readouts.size()) {
    throw std::invalid_argument("backward: loss has " + std::to_string(loss.readouts.size()) +
                                " readouts, trajectory recorded " + std::to_string(traj.readouts.size()));
  }
  for (std::size_t k = 0; k < loss.readouts.size(); ++k) {
    if (loss.readouts[k].t != traj.readouts[k].t) {
      throw std::invalid_argument("backward: readout time mismatch at index " + std::to_string(k));
    }
  }
}

}  // namespace

double evaluate_loss(const Trajectory& traj, const LossSpec& loss) {
  check_loss_spec(traj, loss);
  double total = 0.0;
  for (std::size_t k = 0; k < loss.readouts.size(); ++k) {
    const auto& r = traj.readouts[k];
    Vec dc(r.c.size(), 0.0), dtr(r.tr.size(), 0.0);
    total += loss.readouts[k].fn(r.c, r.tr, dc, dtr);
  }
  return total;
}

BackwardResult backward(const Trajectory& traj, const LossSpec& loss, const LayerParams& p,
                        const BackwardOptions& opt) {
  check_loss_spec(traj, loss);
  if (traj.n != p.n) throw DimensionError("backward: trajectory does not match layer size");
  const std::size_t J = traj.output_map.rows();
  BackwardResult res;
  res.grads = Gradients::zeros_like(p);
  AdjointState adj = AdjointState::zeros(p.n, J);
  adj.t = traj.T;
  std::array<Vec, kNumGates> bias;
  for (auto& b : bias) b.assign(p.n, 0.0);

  for (auto it = traj.timeline.rbegin(); it != traj.timeline.rend(); ++it) {
    switch (it->kind) {
      case StepKind::flow: {
        adj = adjoint_flow(adj, traj.segments[it->index], p, traj.tau_kappa, &bias, opt.substeps);
        break;
      }
      case StepKind::readout: {
        const auto& r = traj.readouts[it->index];
        Vec dc(p.n, 0.0), dtr(J, 0.0);
        res.loss += loss.readouts[it->index].fn(r.c, r.tr, dc, dtr);
        for (std::size_t i = 0; i < p.n; ++i) adj.lambda_c[i] -= dc[i] / p.config.tau_m;
        for (std::size_t j = 0; j < J; ++j) adj.lambda_tr[j] -= dtr[j] / traj.tau_kappa;
        break;
      }
      case StepKind::event: {
        const auto& rec = traj.events[it->index];
        if (rec.event.kind == EventKind::input) {
          accumulate_input_gradients(rec, adj, res.grads, p);
        } else {
          accumulate_event_gradients(rec, adj, res.grads, p, opt);
          adj = adjoint_event_transition(adj, rec, p, traj.output_map, 0.0, opt);
        }
        adj.t = rec.event.s;
        break;
      }
    }
  }
  accumulate_bias_gradients(bias, res.grads);
  res.initial = adj;
  return res;
}

}  // namespace egru::adjoint
