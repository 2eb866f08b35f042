#include "egru/continuous.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <ostream>

namespace egru::continuous {

HybridState HybridState::zeros(std::size_t n) {
  HybridState s;
  for (auto& a : s.a) a.assign(n, 0.0);
  s.c.assign(n, 0.0);
  return s;
}

std::size_t Trajectory::internal_event_count() const {
  return static_cast<std::size_t>(std::count_if(events.begin(), events.end(), [](const EventRecord& r) {
    return r.event.kind == EventKind::internal;
  }));
}

namespace {

std::array<Vec, kNumGates> decayed(const std::array<Vec, kNumGates>& a, double dt, const LayerParams& p) {
  const double f = std::exp(-dt / p.config.tau_s);
  std::array<Vec, kNumGates> out = a;
  for (std::size_t g = 0; g < kNumGates; ++g) {
    for (std::size_t i = 0; i < p.n; ++i) {
      out[g][i] = -p.b[g][i] + (a[g][i] + p.b[g][i]) * f;
    }
  }
  return out;
}

Vec rk4_c(const std::array<Vec, kNumGates>& a0, const Vec& c0, double h, const LayerParams& p) {
  const std::size_t n = p.n;
  const auto a_mid = decayed(a0, 0.5 * h, p);
  const auto a_end = decayed(a0, h, p);
  const Vec k1 = state_derivative(a0, c0, p);
  Vec tmp(n);
  for (std::size_t i = 0; i < n; ++i) tmp[i] = c0[i] + 0.5 * h * k1[i];
  const Vec k2 = state_derivative(a_mid, tmp, p);
  for (std::size_t i = 0; i < n; ++i) tmp[i] = c0[i] + 0.5 * h * k2[i];
  const Vec k3 = state_derivative(a_mid, tmp, p);
  for (std::size_t i = 0; i < n; ++i) tmp[i] = c0[i] + h * k3[i];
  const Vec k4 = state_derivative(a_end, tmp, p);
  Vec out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = c0[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
  }
  return out;
}

HybridState step(const HybridState& s, double h, const LayerParams& p) {
  HybridState out;
  out.t = s.t + h;
  out.c = rk4_c(s.a, s.c, h, p);
  out.a = decayed(s.a, h, p);
  return out;
}

void check_same_size(const HybridState& s, const LayerParams& p) {
  if (s.c.size() != p.n) throw DimensionError("hybrid state does not match layer size");
  for (const auto& a : s.a) {
    if (a.size() != p.n) throw DimensionError("hybrid state does not match layer size");
  }
}

}  // namespace

HybridState decay_activations(const HybridState& s, double dt, const LayerParams& p) {
  check_same_size(s, p);
  HybridState out = s;
  out.t = s.t + dt;
  out.a = decayed(s.a, dt, p);
  return out;
}

Vec state_derivative(const std::array<Vec, kNumGates>& a, std::span<const double> c, const LayerParams& p) {
  Vec out(p.n);
  for (std::size_t i = 0; i < p.n; ++i) {
    const double u = sigmoid(a[kUpdate][i]);
    const double z = std::tanh(a[kCandidate][i]);
    out[i] = u * (z - c[i]) / p.config.tau_m;
  }
  return out;
}

HybridState flow_c(const HybridState& s, double dt, const LayerParams& p, std::size_t substeps) {
  check_same_size(s, p);
  if (substeps == 0) throw std::invalid_argument("flow_c: substeps must be >= 1");
  HybridState cur = s;
  const double h = dt / static_cast<double>(substeps);
  for (std::size_t k = 0; k < substeps; ++k) cur = step(cur, h, p);
  cur.t = s.t + dt;
  return cur;
}

std::optional<Crossing> detect_crossing(const HybridState& s, double dt, const LayerParams& p, double tol) {
  check_same_size(s, p);
  const Vec theta = p.thresholds();
  for (std::size_t i = 0; i < p.n; ++i) {
    if (s.c[i] >= theta[i]) return Crossing{i, s.t};
  }
  if (!(dt > 0.0)) return std::nullopt;
  const Vec c_end = rk4_c(s.a, s.c, dt, p);
  std::optional<Crossing> best;
  for (std::size_t i = 0; i < p.n; ++i) {
    if (c_end[i] < theta[i]) continue;
    // Bisection on the one-step flow map keeps s* consistent with the
    // trajectory the integrator actually produces.
    double lo = 0.0, hi = dt;
    double f_lo = s.c[i] - theta[i], f_hi = c_end[i] - theta[i];
    while (hi - lo > tol) {
      const double mid = 0.5 * (lo + hi);
      const double f_mid = rk4_c(s.a, s.c, mid, p)[i] - theta[i];
      if (f_mid >= 0.0) {
        hi = mid;
        f_hi = f_mid;
      } else {
        lo = mid;
        f_lo = f_mid;
      }
    }
    const double h = f_hi > f_lo ? lo + (hi - lo) * (-f_lo) / (f_hi - f_lo) : hi;
    const double when = s.t + std::clamp(h, lo, hi);
    if (!best || when < best->s) best = Crossing{i, when};
  }
  return best;
}

std::pair<HybridState, EventRecord> apply_internal_event(const HybridState& s, std::size_t n, const LayerParams& p,
                                                         double tol) {
  check_same_size(s, p);
  if (n >= p.n) throw std::out_of_range("apply_internal_event: unit index out of range");
  const double theta_n = p.threshold(n);
  if (std::abs(s.c[n] - theta_n) > tol * std::max(1.0, theta_n)) {
    throw std::invalid_argument("apply_internal_event: unit " + std::to_string(n) + " is not at its threshold");
  }
  EventRecord rec;
  rec.event = {s.t, EventKind::internal, n, s.c[n]};
  rec.c_minus = s.c;
  rec.a_minus = s.a;
  rec.r_minus.resize(p.n);
  rec.rdot_minus.resize(p.n);
  for (std::size_t i = 0; i < p.n; ++i) {
    const double ar = s.a[kReset][i];
    rec.r_minus[i] = sigmoid(ar);
    rec.rdot_minus[i] = sigmoid_prime(ar) * (-(ar + p.b[kReset][i]) / p.config.tau_s);
  }
  rec.cdot_minus = state_derivative(s.a, s.c, p);

  HybridState out = s;
  const double cn = s.c[n];
  const double rn = rec.r_minus[n];
  for (std::size_t m = 0; m < p.n; ++m) {
    if (m == n) continue;
    out.a[kUpdate][m] += p.V[kUpdate](m, n) * cn;
    out.a[kReset][m] += p.V[kReset](m, n) * cn;
    out.a[kCandidate][m] += p.V[kCandidate](m, n) * (rn * cn);
  }
  out.c[n] = 0.0;
  rec.cdot_plus = state_derivative(out.a, out.c, p);
  return {out, rec};
}

HybridState apply_input_event(const HybridState& s, std::size_t channel, double value, const LayerParams& p) {
  check_same_size(s, p);
  if (channel >= p.d) {
    throw std::out_of_range("apply_input_event: channel " + std::to_string(channel) + " out of range (" +
                            std::to_string(p.d) + " channels)");
  }
  HybridState out = s;
  for (std::size_t g = 0; g < kNumGates; ++g) {
    for (std::size_t l = 0; l < p.n; ++l) out.a[g][l] += p.U[g](l, channel) * value;
  }
  return out;
}

Trajectory simulate(const LayerParams& p, const std::vector<InputEvent>& inputs, double T, const SimConfig& cfg) {
  if (!(T > 0.0)) throw std::invalid_argument("simulate: T must be positive");
  const double max_step = cfg.integ.max_step > 0.0 ? cfg.integ.max_step : p.config.tau_m / 20.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    if (inputs[k].s < 0.0 || inputs[k].s > T) throw std::invalid_argument("simulate: input event outside [0, T]");
    if (k > 0 && inputs[k].s < inputs[k - 1].s) throw std::invalid_argument("simulate: input events not sorted");
  }
  for (double r : cfg.readout_times) {
    if (r < 0.0 || r > T) throw std::invalid_argument("simulate: readout time outside [0, T]");
  }
  if (cfg.output_map.size() > 0 && cfg.output_map.cols() != p.n) {
    throw DimensionError("simulate: output map must have n columns");
  }

  Trajectory traj;
  traj.n = p.n;
  traj.T = T;
  traj.output_map = cfg.output_map;
  traj.tau_kappa = cfg.tau_kappa;
  const Vec theta = p.thresholds();

  std::vector<double> breaks{0.0, T};
  for (const auto& e : inputs) breaks.push_back(e.s);
  for (double r : cfg.readout_times) breaks.push_back(r);
  std::sort(breaks.begin(), breaks.end());
  breaks.erase(std::unique(breaks.begin(), breaks.end()), breaks.end());

  std::vector<double> readouts = cfg.readout_times;
  std::sort(readouts.begin(), readouts.end());
  std::size_t next_input = 0, next_readout = 0, internal = 0;
  HybridState cur = HybridState::zeros(p.n);

  // Readouts at a breakpoint see the state before that time's inputs.
  auto at_breakpoint = [&](double t) {
    while (next_readout < readouts.size() && readouts[next_readout] == t) {
      ReadoutRecord r{t, cur.c, {}};
      traj.readouts.push_back(std::move(r));
      traj.timeline.push_back({StepKind::readout, traj.readouts.size() - 1});
      ++next_readout;
    }
    while (next_input < inputs.size() && inputs[next_input].s == t) {
      const auto& in = inputs[next_input];
      cur = apply_input_event(cur, in.channel, in.value, p);
      EventRecord rec;
      rec.event = {t, EventKind::input, in.channel, in.value};
      traj.events.push_back(std::move(rec));
      traj.timeline.push_back({StepKind::event, traj.events.size() - 1});
      ++next_input;
    }
  };

  auto push_segment = [&](const HybridState& from, const HybridState& to) {
    if (!(to.t > from.t)) return;
    FlowSegment seg{from.t, to.t, from.a, from.c, to.c, state_derivative(from.a, from.c, p),
                    state_derivative(to.a, to.c, p)};
    traj.segments.push_back(std::move(seg));
    traj.timeline.push_back({StepKind::flow, traj.segments.size() - 1});
  };

  auto fire = [&](std::size_t unit, double integrated_c) {
    if (++internal > cfg.integ.max_events) {
      throw EventCapExceeded("simulate: more than " + std::to_string(cfg.integ.max_events) + " internal events");
    }
    cur.c[unit] = theta[unit];  // the crossing condition holds exactly
    auto [next, rec] = apply_internal_event(cur, unit, p);
    rec.event.value = integrated_c;
    cur = std::move(next);
    traj.events.push_back(std::move(rec));
    traj.timeline.push_back({StepKind::event, traj.events.size() - 1});
  };

  for (std::size_t b = 0; b + 1 < breaks.size(); ++b) {
    at_breakpoint(breaks[b]);
    const double t0 = breaks[b], t1 = breaks[b + 1];
    const auto nsub = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil((t1 - t0) / max_step - 1e-9)));
    for (std::size_t k = 1; k <= nsub; ++k) {
      const double grid = k == nsub ? t1 : t0 + (t1 - t0) * static_cast<double>(k) / static_cast<double>(nsub);
      while (true) {
        const auto hit = detect_crossing(cur, grid - cur.t, p, cfg.integ.tol_event);
        if (!hit) {
          const HybridState next = step(cur, grid - cur.t, p);
          push_segment(cur, next);
          cur = next;
          cur.t = grid;
          break;
        }
        HybridState at = hit->s > cur.t ? step(cur, hit->s - cur.t, p) : cur;
        at.t = hit->s;
        push_segment(cur, at);
        const double integrated_c = at.c[hit->unit];
        cur = std::move(at);
        fire(hit->unit, integrated_c);
      }
    }
  }
  at_breakpoint(T);
  traj.final_state = cur;

  if (cfg.output_map.size() > 0) {
    for (auto& r : traj.readouts) r.tr = output_traces(traj, r.t);
  }
  return traj;
}

Vec segment_c(const FlowSegment& seg, double t) {
  const double h = seg.t1 - seg.t0;
  const double s = (t - seg.t0) / h;
  const double s2 = s * s, s3 = s2 * s;
  const double h00 = 2 * s3 - 3 * s2 + 1, h10 = s3 - 2 * s2 + s, h01 = -2 * s3 + 3 * s2, h11 = s3 - s2;
  Vec out(seg.c0.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = h00 * seg.c0[i] + h10 * h * seg.cdot0[i] + h01 * seg.c1[i] + h11 * h * seg.cdot1[i];
  }
  return out;
}

std::array<Vec, kNumGates> segment_a(const FlowSegment& seg, double t, const LayerParams& p) {
  return decayed(seg.a0, t - seg.t0, p);
}

Vec output_traces(const Trajectory& traj, double t) {
  const Mat& M = traj.output_map;
  Vec tr(M.rows(), 0.0);
  for (const auto& rec : traj.events) {
    if (rec.event.kind != EventKind::internal || rec.event.s > t) continue;
    const std::size_t n = rec.event.unit;
    const double f = std::exp(-(t - rec.event.s) / traj.tau_kappa) * rec.c_minus[n];
    for (std::size_t j = 0; j < M.rows(); ++j) tr[j] += M(j, n) * f;
  }
  return tr;
}

void write_raster(std::ostream& os, const Trajectory& traj) {
  os << "# s kind unit value c_minus\n";
  const auto old = os.precision(17);
  for (const auto& rec : traj.events) {
    const auto& e = rec.event;
    if (e.kind == EventKind::internal) {
      os << e.s << " internal " << e.unit << ' ' << e.value << ' ' << rec.c_minus[e.unit] << '\n';
    } else {
      os << e.s << " input " << e.unit << ' ' << e.value << " -\n";
    }
  }
  os.precision(old);
}

}  // namespace egru::continuous
