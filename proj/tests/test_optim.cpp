#include <random>

#include "doctest.h"
#include "egru/discrete.hpp"
#include "egru/optim.hpp"

using namespace egru;
using namespace egru::optim;

namespace {

double total_norm(const std::vector<Vec>& blocks) {
  double s = 0.0;
  for (const auto& b : blocks) {
    for (double x : b) s += x * x;
  }
  return std::sqrt(s);
}

std::vector<std::span<double>> spans(std::vector<Vec>& blocks) {
  std::vector<std::span<double>> out;
  for (auto& b : blocks) out.emplace_back(b);
  return out;
}

}  // namespace

TEST_CASE("Adam first step matches the bias-corrected hand formula") {
  AdamConfig cfg;
  cfg.lr = 0.01;
  AdamState s(cfg);
  Vec x{2.0}, g{1.0};
  adam_step({std::span<double>(x)}, {std::span<const double>(g)}, s);
  // m_hat = g, v_hat = g^2 after one step
  CHECK(x[0] == 2.0 - 0.01 * 1.0 / (1.0 + 1e-8));
  CHECK(s.step == 1);

  // Second step with g = -2: moments by hand.
  g[0] = -2.0;
  const double m = 0.9 * 0.1 + 0.1 * -2.0;
  const double v = 0.999 * 0.001 + 0.001 * 4.0;
  const double mh = m / (1 - 0.9 * 0.9), vh = v / (1 - 0.999 * 0.999);
  const double expect = x[0] - 0.01 * mh / (std::sqrt(vh) + 1e-8);
  adam_step({std::span<double>(x)}, {std::span<const double>(g)}, s);
  CHECK(x[0] == doctest::Approx(expect).epsilon(1e-15));
}

TEST_CASE("Adam with zero gradient leaves parameters unchanged") {
  auto p = init_params(4, 2, 3);
  const auto before = p;
  AdamState s;
  const auto g = Gradients::zeros_like(p);
  for (int k = 0; k < 5; ++k) adam_step(p, g, s);
  for (std::size_t gi = 0; gi < kNumGates; ++gi) {
    CHECK(p.V[gi] == before.V[gi]);
    CHECK(p.U[gi] == before.U[gi]);
    CHECK(p.b[gi] == before.b[gi]);
  }
  CHECK(p.theta_raw == before.theta_raw);
}

TEST_CASE("Adam is deterministic over 100 steps") {
  auto run = [] {
    auto p = init_params(3, 2, 9);
    AdamState s;
    std::mt19937_64 rng(4);
    std::normal_distribution<double> nd;
    for (int k = 0; k < 100; ++k) {
      auto g = Gradients::zeros_like(p);
      for (auto b : grad_blocks(g)) {
        for (auto& x : b) x = nd(rng);
      }
      adam_step(p, g, s);
    }
    return p;
  };
  const auto a = run(), b = run();
  for (std::size_t g = 0; g < kNumGates; ++g) CHECK(a.V[g] == b.V[g]);
  CHECK(a.theta_raw == b.theta_raw);
}

TEST_CASE("Adam keeps abs-transformed thresholds positive") {
  ParamConfig pc;
  pc.theta_transform = ThresholdTransform::abs;
  auto p = init_params(3, 1, 2, pc);
  AdamConfig ac;
  ac.lr = 10.0;
  AdamState s(ac);
  auto g = Gradients::zeros_like(p);
  for (auto& x : g.dtheta_raw) x = 1.0;  // pushes raw values far below zero
  for (int k = 0; k < 3; ++k) {
    adam_step(p, g, s);
    for (std::size_t i = 0; i < p.n; ++i) CHECK(p.threshold(i) > 0.0);
  }
}

TEST_CASE("clip_global_norm") {
  std::vector<Vec> g{{3.0}, {4.0}};
  CHECK(clip_global_norm(spans(g), 1.0) == 5.0);
  CHECK(g[0][0] == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(g[1][0] == doctest::Approx(0.8).epsilon(1e-15));

  std::vector<Vec> small{{0.1, -0.2}};
  clip_global_norm(spans(small), 1.0);
  CHECK(small[0] == Vec{0.1, -0.2});

  CHECK_THROWS(clip_global_norm(spans(small), 0.0));

  std::mt19937_64 rng(11);
  std::normal_distribution<double> nd(0.0, 3.0);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<Vec> r(3, Vec(5));
    for (auto& b : r) {
      for (auto& x : b) x = nd(rng);
    }
    const double max_norm = 0.25 + 0.05 * trial;
    clip_global_norm(spans(r), max_norm);
    CHECK(total_norm(r) <= max_norm * (1 + 1e-12));
    const auto once = r;
    clip_global_norm(spans(r), max_norm);  // idempotent
    for (std::size_t b = 0; b < r.size(); ++b) {
      for (std::size_t i = 0; i < r[b].size(); ++i) CHECK(r[b][i] == doctest::Approx(once[b][i]).epsilon(1e-14));
    }
  }
}

TEST_CASE("exp_trace: zero input, analytic decay, linearity") {
  CHECK(exp_trace(Mat(6, 2), 10.0) == Mat(6, 2));

  Mat y(11, 1);
  y(0, 0) = 1.0;
  CHECK(exp_trace(y, 10.0)(10, 0) == doctest::Approx(std::exp(-1.0)).epsilon(1e-14));

  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-1, 1);
  Mat a(20, 3), b(20, 3), sum(20, 3);
  for (std::size_t k = 0; k < a.size(); ++k) {
    a.data()[k] = u(rng);
    b.data()[k] = u(rng);
    sum.data()[k] = 2.0 * a.data()[k] - b.data()[k];
  }
  const auto ta = exp_trace(a, 3.0), tb = exp_trace(b, 3.0), ts = exp_trace(sum, 3.0);
  for (std::size_t k = 0; k < ts.size(); ++k) {
    CHECK(ts.data()[k] == doctest::Approx(2.0 * ta.data()[k] - tb.data()[k]).epsilon(1e-12));
  }
  CHECK_THROWS(exp_trace(a, 0.0));
}

TEST_CASE("exp_trace matches the direct convolution sum") {
  std::mt19937_64 rng(8);
  std::bernoulli_distribution fire(0.3);
  std::uniform_real_distribution<double> amp(0.1, 2.0);
  const double tau = 7.0, k = std::exp(-1.0 / tau);
  Mat y(50, 4);
  for (auto& x : y.data()) x = fire(rng) ? amp(rng) : 0.0;
  const auto tr = exp_trace(y, tau);
  for (std::size_t t = 0; t < y.rows(); ++t) {
    for (std::size_t i = 0; i < y.cols(); ++i) {
      double direct = 0.0;
      for (std::size_t s = 0; s <= t; ++s) direct += std::pow(k, static_cast<double>(t - s)) * y(s, i);
      CHECK(tr(t, i) == doctest::Approx(direct).epsilon(1e-12));
    }
  }
}

TEST_CASE("exp_trace_at sums only past events") {
  const std::vector<TraceEvent> ev{{1.0, 2.0}, {3.0, -1.0}};
  CHECK(exp_trace_at(ev, 2.0, 0.5) == 0.0);
  CHECK(exp_trace_at(ev, 2.0, 1.0) == 2.0);
  CHECK(exp_trace_at(ev, 2.0, 5.0) == doctest::Approx(2.0 * std::exp(-2.0) - std::exp(-1.0)).epsilon(1e-14));
}

TEST_CASE("loss reference values") {
  const Vec zero{0.0};
  const Vec one{1.0};
  CHECK(bce_with_logits(zero, one).loss == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  const Vec uniform(7, 0.3);
  CHECK(cross_entropy_softmax(uniform, 4).loss == doctest::Approx(std::log(7.0)).epsilon(1e-14));
  CHECK_THROWS(cross_entropy_softmax(uniform, 7));
  const Vec big{800.0, -800.0};
  const Vec tgt{1.0, 0.0};
  CHECK(std::isfinite(bce_with_logits(big, tgt).loss));
  CHECK(std::isfinite(cross_entropy_softmax(big, 1).loss));
}

TEST_CASE("loss gradients match central differences") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-3, 3);
  for (int trial = 0; trial < 20; ++trial) {
    Vec x(5), y(5);
    for (auto& v : x) v = u(rng);
    for (auto& v : y) v = (u(rng) + 3) / 6;
    const std::size_t label = static_cast<std::size_t>(trial % 5);
    const auto b = bce_with_logits(x, y);
    const auto c = cross_entropy_softmax(x, label);
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double h = 1e-6;
      Vec xp = x, xm = x;
      xp[i] += h;
      xm[i] -= h;
      const double fb = (bce_with_logits(xp, y).loss - bce_with_logits(xm, y).loss) / (2 * h);
      const double fc = (cross_entropy_softmax(xp, label).loss - cross_entropy_softmax(xm, label).loss) / (2 * h);
      CHECK(std::abs(fb - b.grad[i]) <= 1e-6 * std::max(1.0, std::abs(fb)));
      CHECK(std::abs(fc - c.grad[i]) <= 1e-6 * std::max(1.0, std::abs(fc)));
    }
  }
}

namespace {

discrete::DiscreteTrace random_trace(std::uint64_t seed, const LayerParams& p, std::size_t T) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-0.5, 1.5);
  discrete::DiscreteTrace tr;
  tr.c = Mat(T, p.n);
  tr.y = Mat(T, p.n);
  tr.x = Mat(T, p.d);
  tr.fired.assign(T * p.n, 0);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t i = 0; i < p.n; ++i) {
      tr.c(t, i) = u(rng);
      tr.fired[t * p.n + i] = tr.c(t, i) > p.threshold(i);
      tr.y(t, i) = tr.fired[t * p.n + i] ? tr.c(t, i) : 0.0;
    }
  }
  return tr;
}

/// Antiderivative of the triangular pseudo-derivative around theta, i.e. the
/// smooth step whose derivative the regularizer uses in place of dH/dc.
double smooth_step(double c, double theta, double eps, double peak) {
  const double x = std::clamp((c - theta) / eps, -1.0, 1.0);
  const double area = x <= 0 ? 0.5 * (1 + x) * (1 + x) : 1.0 - 0.5 * (1 - x) * (1 - x);
  return peak * eps * area;
}

}  // namespace

TEST_CASE("regularizer zero points") {
  auto p = init_params(4, 1, 2);
  RegularizerConfig cfg;
  cfg.w_reg = 1.0;
  cfg.w_v = 1.0;
  auto tr = random_trace(1, p, 5);
  // Exactly one event among 20 unit-steps: rate 0.05.
  std::fill(tr.fired.begin(), tr.fired.end(), 0);
  tr.fired[7] = 1;
  for (std::size_t t = 0; t < 5; ++t) {
    for (std::size_t i = 0; i < 4; ++i) tr.c(t, i) = p.threshold(i) - 0.05;
  }
  const auto r = sparsity_regularizers(tr, p, cfg);
  CHECK(r.l_reg == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(std::abs(r.l_act) < 1e-15);
}

TEST_CASE("regularizer gradients match central differences of the surrogate") {
  auto p = init_params(3, 1, 6);
  RegularizerConfig cfg;
  cfg.w_reg = 0.7;
  cfg.w_v = 0.3;
  const auto tr = random_trace(2, p, 6);
  const auto r = sparsity_regularizers(tr, p, cfg);
  const double eps = p.config.epsilon, peak = p.config.pd_peak;
  const double inv = 1.0 / 18.0;
  // Frozen trace, with H replaced by its smooth surrogate so the value is
  // differentiable; theta enters only l_reg.
  auto surrogate = [&](const Mat& c, const Vec& theta) {
    double s = 0.0, a = 0.0;
    for (std::size_t t = 0; t < c.rows(); ++t) {
      for (std::size_t i = 0; i < c.cols(); ++i) {
        s += smooth_step(c(t, i), theta[i], eps, peak);
        a += c(t, i) - (p.threshold(i) - cfg.act_offset);
      }
    }
    return cfg.w_reg * s * inv + cfg.w_v * a * inv;
  };
  const Vec theta = p.thresholds();
  const double h = 1e-7;
  for (std::size_t t = 0; t < 6; ++t) {
    for (std::size_t i = 0; i < 3; ++i) {
      Mat cp = tr.c, cm = tr.c;
      cp(t, i) += h;
      cm(t, i) -= h;
      const double fd = (surrogate(cp, theta) - surrogate(cm, theta)) / (2 * h);
      CHECK(std::abs(fd - r.dL_dc(t, i)) <= 1e-6 * std::max(1e-3, std::abs(fd)));
    }
  }
  for (std::size_t i = 0; i < 3; ++i) {
    Vec tp = theta, tm = theta;
    tp[i] += h;
    tm[i] -= h;
    const double fd = (surrogate(tr.c, tp) - surrogate(tr.c, tm)) / (2 * h);
    CHECK(std::abs(fd - r.dL_dtheta[i]) <= 1e-6 * std::max(1e-3, std::abs(fd)));
  }
}
