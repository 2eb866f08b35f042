#pragma once

// Dense per-scalar rebuild of the discrete EGRU graph on the reverse-mode
// tape. H is constant in value and contributes the triangular surrogate as
// its derivative. Shares no kernels with the library.

#include <algorithm>
#include <array>

#include "egru/params.hpp"
#include "egru/check/scalar_tape.hpp"

namespace egru::check {

struct SurrogateResult {
  egru::Gradients grads;
  double loss = 0.0;
  std::vector<double> c;  ///< T*n forward values for cross-checking
  std::vector<double> y;
};

/// Loss = sum_t,i wy(t,i) y_t,i + sum_i wc_final[i] c_{T-1,i} + sum_t,i wc(t,i) c_t,i.
inline SurrogateResult surrogate_egru(const egru::LayerParams& p, const egru::Mat& inputs, const egru::Mat& wy,
                                      const std::vector<double>& wc_final, const egru::Mat* wc = nullptr) {
  using egru::kCandidate;
  using egru::kReset;
  using egru::kUpdate;
  const std::size_t n = p.n, d = p.d, T = inputs.rows();
  Tape tp;
  using V = Tape::Var;
  std::array<std::vector<V>, 3> Vw, Uw, bw;
  for (std::size_t g = 0; g < 3; ++g) {
    for (double w : p.V[g].data()) Vw[g].push_back(tp.leaf(w));
    for (double w : p.U[g].data()) Uw[g].push_back(tp.leaf(w));
    for (double w : p.b[g]) bw[g].push_back(tp.leaf(w));
  }
  std::vector<V> raw;
  for (double t : p.theta_raw) raw.push_back(tp.leaf(t));
  std::vector<V> theta;
  for (std::size_t i = 0; i < n; ++i) {
    V r = raw[p.config.theta_mode == egru::ThresholdMode::scalar ? 0 : i];
    theta.push_back(p.config.theta_transform == egru::ThresholdTransform::sigmoid ? tp.sigmoid(r)
                                                                                   : tp.abs_floor(r, p.config.abs_floor));
  }

  const V zero = tp.constant(0.0);
  std::vector<V> y_prev(n, zero), c_prev(n, zero);
  V loss = tp.constant(0.0);
  SurrogateResult res;
  for (std::size_t t = 0; t < T; ++t) {
    std::vector<V> x;
    for (std::size_t k = 0; k < d; ++k) x.push_back(tp.constant(inputs(t, k)));
    auto pre = [&](std::size_t g, std::size_t i) {
      V a = bw[g][i];
      for (std::size_t k = 0; k < d; ++k) a = tp.add(a, tp.mul(Uw[g][i * d + k], x[k]));
      return a;
    };
    std::vector<V> u(n), r(n), z(n), c(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      V au = pre(kUpdate, i), ar = pre(kReset, i);
      for (std::size_t j = 0; j < n; ++j) {
        au = tp.add(au, tp.mul(Vw[kUpdate][i * n + j], y_prev[j]));
        ar = tp.add(ar, tp.mul(Vw[kReset][i * n + j], y_prev[j]));
      }
      u[i] = tp.sigmoid(au);
      r[i] = tp.sigmoid(ar);
    }
    for (std::size_t i = 0; i < n; ++i) {
      V az = pre(kCandidate, i);
      for (std::size_t j = 0; j < n; ++j) az = tp.add(az, tp.mul(Vw[kCandidate][i * n + j], tp.mul(r[j], y_prev[j])));
      z[i] = tp.tanh(az);
    }
    for (std::size_t i = 0; i < n; ++i) {
      const V one_minus_u = tp.sub(tp.constant(1.0), u[i]);
      if (p.config.reset_mode == egru::ResetMode::hard) {
        c[i] = tp.add(tp.mul(u[i], z[i]), tp.mul(one_minus_u, tp.sub(c_prev[i], y_prev[i])));
      } else {
        c[i] = tp.sub(tp.add(tp.mul(u[i], z[i]), tp.mul(one_minus_u, c_prev[i])), y_prev[i]);
      }
      y[i] = tp.spike(c[i], theta[i], p.config.epsilon, p.config.pd_peak);
      loss = tp.add(loss, tp.scale(y[i], wy(t, i)));
      if (wc != nullptr) loss = tp.add(loss, tp.scale(c[i], (*wc)(t, i)));
      if (t + 1 == T && !wc_final.empty()) loss = tp.add(loss, tp.scale(c[i], wc_final[i]));
      res.c.push_back(tp.value(c[i]));
      res.y.push_back(tp.value(y[i]));
    }
    y_prev = y;
    c_prev = c;
  }

  const auto g = tp.grad(loss);
  res.loss = tp.value(loss);
  res.grads = egru::Gradients::zeros_like(p);
  for (std::size_t gate = 0; gate < 3; ++gate) {
    for (std::size_t k = 0; k < Vw[gate].size(); ++k) res.grads.dV[gate].data()[k] = g[Vw[gate][k].id];
    for (std::size_t k = 0; k < Uw[gate].size(); ++k) res.grads.dU[gate].data()[k] = g[Uw[gate][k].id];
    for (std::size_t k = 0; k < bw[gate].size(); ++k) res.grads.db[gate][k] = g[bw[gate][k].id];
  }
  for (std::size_t k = 0; k < raw.size(); ++k) res.grads.dtheta_raw[k] = g[raw[k].id];
  return res;
}

/// Largest elementwise relative error between two gradient sets.
inline double max_rel_error(const egru::Gradients& a, const egru::Gradients& b, double floor) {
  const auto ba = egru::grad_blocks(a);
  const auto bb = egru::grad_blocks(b);
  double worst = 0.0;
  for (std::size_t k = 0; k < ba.size(); ++k) {
    for (std::size_t i = 0; i < ba[k].size(); ++i) {
      const double x = ba[k][i], y = bb[k][i];
      const double den = std::max({std::abs(x), std::abs(y), floor});
      worst = std::max(worst, std::abs(x - y) / den);
    }
  }
  return worst;
}

}  // namespace egru::check
