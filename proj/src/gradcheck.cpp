#include "egru/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "egru/check/discrete_cases.hpp"
#include "egru/check/surrogate_egru.hpp"
#include "egru/discrete.hpp"

namespace egru::check {

using continuous::EventKind;

ContinuousCase random_continuous_case(std::uint64_t seed, std::size_t max_n) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick_n(2, std::max<std::size_t>(2, max_n));
  std::uniform_real_distribution<double> unif(-1.0, 1.0);
  const std::size_t n = pick_n(rng), d = 2;
  ParamConfig cfg;
  cfg.tau_s = 2.0 + 3.0 * (0.5 + 0.5 * unif(rng));
  auto p = init_params(n, d, seed, cfg);
  for (std::size_t g = 0; g < kNumGates; ++g) {
    for (auto& w : p.V[g].data()) w *= 2.0;
    for (auto& w : p.U[g].data()) w = 2.5 * unif(rng);
  }
  p.b[kCandidate] = Vec(n);
  for (auto& b : p.b[kCandidate]) b = 0.2 + 0.6 * unif(rng);
  for (auto& b : p.b[kUpdate]) b = 0.5 * unif(rng);
  for (auto& t : p.theta_raw) t = -0.4 + 0.5 * unif(rng);

  ContinuousCase c;
  c.params = std::move(p);
  c.T = 3.0 + 2.0 * (0.5 + 0.5 * unif(rng));
  const double s0 = 0.1 + 0.4 * (0.5 + 0.5 * unif(rng));
  const double s1 = s0 + 0.4 + 0.8 * (0.5 + 0.5 * unif(rng));
  c.inputs = {{s0, 0, 1.0 + 0.5 * unif(rng)}, {s1, 1, 1.0 + 0.5 * unif(rng)}};
  c.sim.integ.tol_event = 1e-13;
  c.sim.tau_kappa = 1.0;
  c.sim.output_map = Mat(2, n);
  for (auto& m : c.sim.output_map.data()) m = unif(rng) > 0 ? 1.0 : 0.0;
  const double mid = std::round(0.5 * c.T * 1e3) / 1e3;
  c.sim.readout_times = {mid, c.T};

  Vec wc(n), wtr(2);
  for (auto& w : wc) w = unif(rng);
  for (auto& w : wtr) w = unif(rng);
  // A mildly nonlinear readout: linear terms plus half the squared state.
  auto fn = [wc, wtr](const Vec& cv, const Vec& tr, Vec& dc, Vec& dtr) {
    double l = 0.0;
    for (std::size_t i = 0; i < cv.size(); ++i) {
      l += wc[i] * cv[i] + 0.5 * cv[i] * cv[i];
      dc[i] = wc[i] + cv[i];
    }
    for (std::size_t j = 0; j < tr.size(); ++j) {
      l += wtr[j] * tr[j];
      dtr[j] = wtr[j];
    }
    return l;
  };
  c.loss.readouts = {{mid, fn}, {c.T, fn}};
  return c;
}

namespace {

std::vector<std::size_t> event_units(const continuous::Trajectory& t) {
  std::vector<std::size_t> out;
  for (const auto& r : t.events) {
    out.push_back(r.event.kind == EventKind::internal ? r.event.unit : 1000 + r.event.unit);
  }
  return out;
}

double loss_of(const ContinuousCase& c, const LayerParams& p, std::vector<std::size_t>* units) {
  const auto traj = continuous::simulate(p, c.inputs, c.T, c.sim);
  if (units != nullptr) *units = event_units(traj);
  return adjoint::evaluate_loss(traj, c.loss);
}

void fold(BlockError& b, double a, double f, double den_floor) {
  const double diff = std::abs(a - f);
  b.max_abs = std::max(b.max_abs, diff);
  b.max_rel = std::max(b.max_rel, diff / std::max({std::abs(a), std::abs(f), den_floor}));
}

}  // namespace

std::optional<std::string> screen_case(const ContinuousCase& c, std::size_t max_events) {
  const auto traj = continuous::simulate(c.params, c.inputs, c.T, c.sim);
  const std::size_t k = traj.internal_event_count();
  if (k == 0) return "no internal events";
  if (k > max_events) return "too many internal events (" + std::to_string(k) + ")";
  std::vector<double> breaks{0.0, c.T};
  for (const auto& e : c.inputs) breaks.push_back(e.s);
  for (double r : c.sim.readout_times) breaks.push_back(r);
  for (const auto& r : traj.events) {
    if (r.event.kind != EventKind::internal) continue;
    for (double b : breaks) {
      if (std::abs(r.event.s - b) < 1e-3) return "event within 1e-3 of a breakpoint";
    }
    const std::size_t n = r.event.unit;
    if (std::abs(r.cdot_minus[n]) < 0.05 * c.params.threshold(n) / c.params.config.tau_m) {
      return "near-grazing crossing";
    }
  }
  return std::nullopt;
}

GradcheckReport continuous_gradcheck(const ContinuousCase& c, const GradcheckOptions& opt) {
  GradcheckReport rep;
  const auto traj = continuous::simulate(c.params, c.inputs, c.T, c.sim);
  rep.internal_events = traj.internal_event_count();
  const auto base_units = event_units(traj);
  const auto bw = adjoint::backward(traj, c.loss, c.params, opt.backward);
  const double den_floor = opt.abs_floor / opt.rel_tol;

  LayerParams p = c.params;
  auto probe = [&](double& slot, double analytic, BlockError& blk) {
    const double keep = slot;
    std::vector<std::size_t> up, dn;
    slot = keep + opt.h;
    const double lp = loss_of(c, p, &up);
    slot = keep - opt.h;
    const double lm = loss_of(c, p, &dn);
    slot = keep;
    if (up != base_units || dn != base_units) rep.structure_stable = false;
    fold(blk, analytic, (lp - lm) / (2.0 * opt.h), den_floor);
  };
  for (std::size_t g = 0; g < kNumGates; ++g) {
    BlockError bv{std::string("V_") + kGateNames[g]}, bu{std::string("U_") + kGateNames[g]},
        bb{std::string("b_") + kGateNames[g]};
    for (std::size_t k = 0; k < p.V[g].size(); ++k) probe(p.V[g].data()[k], bw.grads.dV[g].data()[k], bv);
    for (std::size_t k = 0; k < p.U[g].size(); ++k) probe(p.U[g].data()[k], bw.grads.dU[g].data()[k], bu);
    for (std::size_t k = 0; k < p.b[g].size(); ++k) probe(p.b[g][k], bw.grads.db[g][k], bb);
    rep.blocks.push_back(bv);
    rep.blocks.push_back(bu);
    rep.blocks.push_back(bb);
  }
  for (const auto& b : rep.blocks) rep.max_rel = std::max(rep.max_rel, b.max_rel);
  rep.passed = rep.structure_stable && rep.max_rel < opt.rel_tol;
  return rep;
}

GradcheckReport discrete_gradcheck(std::uint64_t seed, std::size_t max_n, std::size_t max_T, double rel_tol) {
  const auto c = random_discrete_case(seed, max_n, max_T);
  OpCounter k;
  const auto tr = discrete::egru_forward(c.params, c.inputs, k);
  const auto g = discrete::egru_backward(c.params, tr, c.wy, c.wc_final, k);
  const auto ref = surrogate_egru(c.params, c.inputs, c.wy, c.wc_final);
  GradcheckReport rep;
  for (std::size_t q = 0; q < tr.fired.size(); ++q) rep.internal_events += tr.fired[q];
  const auto ga = grad_blocks(g);
  const auto gb = grad_blocks(ref.grads);
  std::vector<std::string> names;
  for (const char* prefix : {"V_", "U_", "b_"}) {
    for (const char* gate : kGateNames) names.push_back(std::string(prefix) + gate);
  }
  names.push_back("theta");
  for (std::size_t b = 0; b < ga.size(); ++b) {
    BlockError blk{names[b]};
    for (std::size_t i = 0; i < ga[b].size(); ++i) fold(blk, ga[b][i], gb[b][i], 1e-12);
    rep.blocks.push_back(blk);
    rep.max_rel = std::max(rep.max_rel, blk.max_rel);
  }
  rep.passed = rep.max_rel < rel_tol;
  return rep;
}

}  // namespace egru::check
