#include <cmath>
#include <sstream>

#include "doctest.h"
#include "egru/continuous.hpp"
#include "egru/gradcheck.hpp"

using namespace egru;
using namespace egru::continuous;

namespace {

LayerParams quiet_params(std::size_t n, std::size_t d) {
  auto p = init_params(n, d, 1);
  for (std::size_t g = 0; g < kNumGates; ++g) {
    p.V[g].fill(0.0);
    p.U[g].fill(0.0);
    std::fill(p.b[g].begin(), p.b[g].end(), 0.0);
  }
  return p;
}

double logit(double q) { return std::log(q / (1 - q)); }

}  // namespace

TEST_CASE("activation decay is the exact exponential flow") {
  auto p = quiet_params(2, 1);
  p.config.tau_s = 3.0;
  auto s = HybridState::zeros(2);
  CHECK(decay_activations(s, 1.7, p).a[0] == Vec{0, 0});
  s.a[kUpdate] = {1.0, -0.4};
  const auto one = decay_activations(s, 3.0, p);
  CHECK(one.a[kUpdate][0] == doctest::Approx(std::exp(-1.0)).epsilon(1e-15));
  p.b[kReset] = {0.3, -1.1};
  s.a[kReset] = {2.0, 0.5};
  const auto full = decay_activations(s, 0.8, p);
  const auto half = decay_activations(decay_activations(s, 0.4, p), 0.4, p);
  for (std::size_t g = 0; g < kNumGates; ++g) {
    for (std::size_t i = 0; i < 2; ++i) CHECK(half.a[g][i] == doctest::Approx(full.a[g][i]).epsilon(1e-15));
  }
  // activations relax to -b
  CHECK(decay_activations(s, 1e4, p).a[kReset][1] == doctest::Approx(1.1));
}

TEST_CASE("state flow special cases") {
  auto p = quiet_params(1, 1);
  auto s = HybridState::zeros(1);
  s.c = {0.6};
  SUBCASE("closed update gate freezes c") {
    p.b[kUpdate] = {-800.0};
    s.a[kUpdate] = {-800.0};
    CHECK(flow_c(s, 2.0, p, 10).c[0] == 0.6);
  }
  SUBCASE("u = 1/2, z = 0 gives exponential decay at rate 1/(2 tau_m)") {
    const auto out = flow_c(s, p.config.tau_m, p, 20);
    const double exact = 0.6 * std::exp(-0.5);
    CHECK(std::abs(out.c[0] - exact) / exact < 1e-8);
  }
}

TEST_CASE("RK4 state flow converges at fourth order") {
  auto p = init_params(3, 1, 4);
  auto s = HybridState::zeros(3);
  s.a = {Vec{0.5, -1.0, 2.0}, Vec{0.1, 0.2, 0.3}, Vec{1.5, -0.7, 0.2}};
  s.c = {0.1, -0.2, 0.3};
  const auto ref = flow_c(s, 1.0, p, 2048);
  const auto coarse = flow_c(s, 1.0, p, 4);
  const auto fine = flow_c(s, 1.0, p, 8);
  double ec = 0, ef = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    ec = std::max(ec, std::abs(coarse.c[i] - ref.c[i]));
    ef = std::max(ef, std::abs(fine.c[i] - ref.c[i]));
  }
  const double ratio = ec / ef;
  CHECK(ratio > 12.0);
  CHECK(ratio < 20.0);
}

TEST_CASE("crossing detection") {
  auto p = quiet_params(2, 1);
  p.theta_raw = {logit(0.5), logit(0.5)};
  auto s = HybridState::zeros(2);
  SUBCASE("decaying states below threshold") {
    s.c = {0.2, 0.1};
    CHECK_FALSE(detect_crossing(s, 0.05, p, 1e-9).has_value());
  }
  SUBCASE("analytic crossing of the exponential approach") {
    // u = 1/2 and z pinned at 0.9 through a_z == -b_z: c(t) = 0.9 (1 - exp(-t / 2))
    const double az = std::atanh(0.9);
    p.b[kCandidate] = {-az, -az};
    s.a[kCandidate] = {az, az};
    s.c = {0.0, -5.0};
    const double t_star = -2.0 * std::log(1.0 - 0.5 / 0.9);
    HybridState cur = s;
    std::optional<Crossing> hit;
    const double h = 0.01;
    while (!(hit = detect_crossing(cur, h, p, 1e-9))) cur = flow_c(cur, h, p);
    CHECK(hit->unit == 0);
    CHECK(std::abs(hit->s - t_star) < 1e-7);  // integrator error dominates tol_event here
  }
  SUBCASE("earlier crossing wins, ties go to the lower index") {
    const double az = std::atanh(0.9);
    p.b[kCandidate] = {-az, -az};
    s.a[kCandidate] = {az, az};
    s.c = {0.3, 0.45};
    auto hit = detect_crossing(s, 0.5, p, 1e-12);
    REQUIRE(hit.has_value());
    CHECK(hit->unit == 1);
    s.c = {0.45, 0.45};
    hit = detect_crossing(s, 0.5, p, 1e-12);
    REQUIRE(hit.has_value());
    CHECK(hit->unit == 0);
  }
}

TEST_CASE("internal event jumps") {
  auto p = quiet_params(2, 1);
  p.theta_raw = {logit(0.8), logit(0.3)};
  auto s = HybridState::zeros(2);
  s.c = {p.threshold(0), 0.1};
  s.a[kReset] = {logit(0.6), 0.0};
  s.a[kUpdate] = {0.4, -0.2};
  SUBCASE("zero weights only reset the firing unit") {
    const auto [out, rec] = apply_internal_event(s, 0, p);
    CHECK(out.c[0] == 0.0);
    CHECK(out.c[1] == 0.1);
    CHECK(out.a == s.a);
    CHECK(rec.event.kind == EventKind::internal);
  }
  SUBCASE("hand arithmetic for the candidate jump") {
    p.V[kCandidate](1, 0) = 1.7;
    p.V[kUpdate](1, 0) = -0.5;
    p.V[kCandidate](0, 0) = 9.0;  // own column entry is unused
    const auto [out, rec] = apply_internal_event(s, 0, p);
    const double r = 1.0 / (1.0 + std::exp(-logit(0.6)));
    CHECK(out.a[kCandidate][1] == doctest::Approx(1.7 * r * 0.8).epsilon(1e-14));
    CHECK(out.a[kUpdate][1] == doctest::Approx(-0.2 - 0.5 * 0.8).epsilon(1e-14));
    CHECK(out.a[kCandidate][0] == 0.0);
    CHECK(out.c[0] == 0.0);
    CHECK(rec.r_minus[0] == doctest::Approx(0.6));
    CHECK(rec.cdot_minus[0] == doctest::Approx(sigmoid(0.4) * (0.0 - 0.8)));
    CHECK(rec.cdot_plus[0] == doctest::Approx(0.0));
  }
  SUBCASE("precondition") {
    s.c[0] = 0.2;
    CHECK_THROWS_AS(apply_internal_event(s, 0, p), std::invalid_argument);
  }
}

TEST_CASE("input event jumps") {
  auto p = quiet_params(3, 2);
  auto s = HybridState::zeros(3);
  CHECK(apply_input_event(s, 1, 0.0, p).a == s.a);
  p.U[kUpdate](2, 1) = 1.0;
  auto out = apply_input_event(s, 1, 1.0, p);
  CHECK(out.a[kUpdate] == Vec{0, 0, 1});
  CHECK(out.a[kReset] == Vec{0, 0, 0});
  auto q = init_params(3, 2, 8);
  s.c = {0.1, 0.2, 0.3};
  out = apply_input_event(s, 0, -0.7, q);
  for (std::size_t g = 0; g < kNumGates; ++g) {
    for (std::size_t l = 0; l < 3; ++l) CHECK(out.a[g][l] == q.U[g](l, 0) * -0.7);
  }
  CHECK(out.c == s.c);
  CHECK_THROWS_AS(apply_input_event(s, 2, 1.0, q), std::out_of_range);
}

TEST_CASE("quiescent simulation") {
  auto p = quiet_params(3, 1);
  const auto traj = simulate(p, {}, 4.0);
  CHECK(traj.internal_event_count() == 0);
  CHECK(traj.final_state.c == Vec{0, 0, 0});
}

TEST_CASE("simulated events satisfy the crossing and reset invariants") {
  std::size_t total = 0;
  for (std::uint64_t seed = 1; seed <= 15; ++seed) {
    const auto c = check::random_continuous_case(seed);
    auto sim = c.sim;
    sim.integ.tol_event = 1e-9;
    const auto traj = simulate(c.params, c.inputs, c.T, sim);
    double prev = -1.0;
    for (std::size_t k = 0; k < traj.events.size(); ++k) {
      const auto& r = traj.events[k];
      CHECK(r.event.s >= prev);
      prev = r.event.s;
      if (r.event.kind != EventKind::internal) continue;
      ++total;
      const std::size_t n = r.event.unit;
      const double theta = c.params.threshold(n);
      CHECK(r.c_minus[n] == theta);
      // the integrated state at the located time sits on the threshold
      CHECK(std::abs(r.event.value - theta) < 1e-9 * std::max(1.0, std::abs(r.cdot_minus[n])) + 1e-12);
    }
    // c_n == 0 right after each internal event: the next segment starts there
    for (std::size_t k = 0; k + 1 < traj.timeline.size(); ++k) {
      const auto& e = traj.timeline[k];
      if (e.kind != StepKind::event) continue;
      const auto& r = traj.events[e.index];
      if (r.event.kind != EventKind::internal) continue;
      for (std::size_t q = k + 1; q < traj.timeline.size(); ++q) {
        if (traj.timeline[q].kind != StepKind::flow) continue;
        CHECK(traj.segments[traj.timeline[q].index].c0[r.event.unit] == 0.0);
        break;
      }
    }
  }
  CHECK(total > 10);
}

TEST_CASE("trajectories are time-invariant") {
  // zero biases make the zero state a fixed point, so a delayed input
  // stream sees the same initial state
  auto c = check::random_continuous_case(3);
  for (auto& b : c.params.b) std::fill(b.begin(), b.end(), 0.0);
  for (auto& e : c.inputs) e.value *= 2.0;
  auto shifted = c.inputs;
  const double shift = 1.0;
  for (auto& e : shifted) e.s += shift;
  SimConfig a, b;
  a.integ.max_step = b.integ.max_step = 0.05;
  const auto t1 = simulate(c.params, c.inputs, c.T, a);
  const auto t2 = simulate(c.params, shifted, c.T + shift, b);
  REQUIRE(t1.internal_event_count() > 0);
  REQUIRE(t1.internal_event_count() == t2.internal_event_count());
  std::size_t k1 = 0, k2 = 0;
  while (k1 < t1.events.size()) {
    CHECK(t2.events[k2].event.s - shift == doctest::Approx(t1.events[k1].event.s).epsilon(1e-9));
    CHECK(t2.events[k2].event.unit == t1.events[k1].event.unit);
    ++k1, ++k2;
  }
}

TEST_CASE("event times converge under step refinement") {
  const auto c = check::random_continuous_case(5);
  SimConfig s1, s2, s3;
  s1.integ.max_step = 0.02;
  s2.integ.max_step = 0.01;
  s3.integ.max_step = 0.005;
  for (auto* s : {&s1, &s2, &s3}) s->integ.tol_event = 1e-12;
  const auto a = simulate(c.params, c.inputs, c.T, s1);
  const auto b = simulate(c.params, c.inputs, c.T, s2);
  const auto d = simulate(c.params, c.inputs, c.T, s3);
  REQUIRE(a.events.size() == b.events.size());
  REQUIRE(b.events.size() == d.events.size());
  double e1 = 0, e2 = 0;
  for (std::size_t k = 0; k < a.events.size(); ++k) {
    e1 = std::max(e1, std::abs(a.events[k].event.s - b.events[k].event.s));
    e2 = std::max(e2, std::abs(b.events[k].event.s - d.events[k].event.s));
  }
  CHECK(e1 < 1e-6);
  CHECK(e2 < e1 / 8.0);
}

TEST_CASE("event cap fails loudly") {
  const auto c = check::random_continuous_case(2);
  auto sim = c.sim;
  sim.integ.max_events = 0;
  if (simulate(c.params, c.inputs, c.T, c.sim).internal_event_count() > 0) {
    CHECK_THROWS_AS(simulate(c.params, c.inputs, c.T, sim), EventCapExceeded);
  }
}

TEST_CASE("Hermite reconstruction matches the stored endpoints") {
  const auto c = check::random_continuous_case(7);
  const auto traj = simulate(c.params, c.inputs, c.T, c.sim);
  const auto& seg = traj.segments[traj.segments.size() / 2];
  CHECK(segment_c(seg, seg.t0) == seg.c0);
  const Vec end = segment_c(seg, seg.t1);
  for (std::size_t i = 0; i < end.size(); ++i) CHECK(end[i] == doctest::Approx(seg.c1[i]).epsilon(1e-14));
}

TEST_CASE("raster format") {
  const auto c = check::random_continuous_case(1);
  const auto traj = simulate(c.params, c.inputs, c.T, c.sim);
  std::ostringstream os;
  write_raster(os, traj);
  std::istringstream is(os.str());
  std::string line;
  std::getline(is, line);
  CHECK(line == "# s kind unit value c_minus");
  std::size_t rows = 0;
  while (std::getline(is, line)) {
    std::istringstream ls(line);
    double s;
    std::string kind, unit, value, cm;
    ls >> s >> kind >> unit >> value >> cm;
    CHECK((kind == "internal" || kind == "input"));
    if (kind == "input") CHECK(cm == "-");
    ++rows;
  }
  CHECK(rows == traj.events.size());
}
