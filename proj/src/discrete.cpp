#include "egru/discrete.hpp"

#include <cmath>

namespace egru::discrete {

namespace {

void check_step_shapes(const LayerParams& p, std::size_t x, std::size_t y, std::size_t c) {
  if (x != p.d) {
    throw DimensionError("step: input has " + std::to_string(x) + " entries, layer expects " + std::to_string(p.d));
  }
  if (y != p.n || c != p.n) {
    throw DimensionError("step: state length does not match layer size " + std::to_string(p.n));
  }
}

struct StepOut {
  std::span<double> c, y, u, r, z;
  std::span<std::uint8_t> fired;
};

// Shared kernel for egru_step and egru_forward; writes into caller storage.
void step_into(const LayerParams& p, std::span<const double> x, std::span<const double> y_prev,
               std::span<const double> c_prev, const Vec& theta, StepOut out, OpCounter& counter,
               const StepOptions& opt, std::vector<SparseEntry>& x_nz, std::vector<SparseEntry>& y_nz,
               OpCounter* recurrent = nullptr) {
  const std::size_t n = p.n;
  x_nz.clear();
  y_nz.clear();
  for (std::size_t k = 0; k < x.size(); ++k) {
    if (x[k] != 0.0) x_nz.push_back({k, x[k]});
  }
  for (std::size_t j = 0; j < n; ++j) {
    if (y_prev[j] != 0.0) y_nz.push_back({j, y_prev[j]});
  }

  for (std::size_t i = 0; i < n; ++i) {
    double au = p.b[kUpdate][i];
    double ar = p.b[kReset][i];
    double az = p.b[kCandidate][i];
    const auto Uu = p.U[kUpdate].row(i);
    const auto Ur = p.U[kReset].row(i);
    const auto Uz = p.U[kCandidate].row(i);
    for (const auto& e : x_nz) {
      au += Uu[e.index] * e.value;
      ar += Ur[e.index] * e.value;
      az += Uz[e.index] * e.value;
    }
    const auto Vu = p.V[kUpdate].row(i);
    const auto Vr = p.V[kReset].row(i);
    for (const auto& e : y_nz) {
      au += Vu[e.index] * e.value;
      ar += Vr[e.index] * e.value;
    }
    out.u[i] = sigmoid(au);
    out.r[i] = sigmoid(ar);
    out.z[i] = az;  // finished below once every r_j is known
  }
  for (std::size_t i = 0; i < n; ++i) {
    double az = out.z[i];
    const auto Vz = p.V[kCandidate].row(i);
    for (const auto& e : y_nz) {
      az += Vz[e.index] * (out.r[e.index] * e.value);
    }
    out.z[i] = std::tanh(az);
  }
  counter.mac += kNumGates * n * (x_nz.size() + y_nz.size());
  if (recurrent != nullptr) recurrent->mac += kNumGates * n * y_nz.size();
  counter.nonlin += kNumGates * n;

  const bool hard = p.config.reset_mode == ResetMode::hard;
  for (std::size_t i = 0; i < n; ++i) {
    const double u = out.u[i];
    double c;
    if (opt.force_gru) {
      c = u * out.z[i] + (1.0 - u) * c_prev[i];
    } else if (hard) {
      c = u * out.z[i] + (1.0 - u) * (c_prev[i] - y_prev[i]);
    } else {
      c = u * out.z[i] + (1.0 - u) * c_prev[i] - y_prev[i];
    }
    out.c[i] = c;
    const bool fire = opt.force_gru || c > theta[i];
    out.fired[i] = fire ? 1 : 0;
    out.y[i] = fire ? c : 0.0;
  }
  counter.adds += 4 * n;
}

}  // namespace

GruStep gru_step(const LayerParams& p, std::span<const double> x, std::span<const double> y_prev) {
  check_step_shapes(p, x.size(), y_prev.size(), y_prev.size());
  OpCounter scratch;
  const auto au = matvec_counted(p.U[kUpdate], x, scratch);
  const auto ar = matvec_counted(p.U[kReset], x, scratch);
  const auto az = matvec_counted(p.U[kCandidate], x, scratch);
  const auto vu = matvec_counted(p.V[kUpdate], y_prev, scratch);
  const auto vr = matvec_counted(p.V[kReset], y_prev, scratch);
  GruStep s;
  const std::size_t n = p.n;
  s.gates.u.resize(n);
  s.gates.r.resize(n);
  s.gates.z.resize(n);
  s.y.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    s.gates.u[i] = sigmoid(au[i] + vu[i] + p.b[kUpdate][i]);
    s.gates.r[i] = sigmoid(ar[i] + vr[i] + p.b[kReset][i]);
  }
  Vec ry(n);
  for (std::size_t j = 0; j < n; ++j) ry[j] = s.gates.r[j] * y_prev[j];
  const auto vz = matvec_counted(p.V[kCandidate], ry, scratch);
  for (std::size_t i = 0; i < n; ++i) {
    s.gates.z[i] = std::tanh(az[i] + vz[i] + p.b[kCandidate][i]);
    s.y[i] = s.gates.u[i] * s.gates.z[i] + (1.0 - s.gates.u[i]) * y_prev[i];
  }
  return s;
}

EgruStep egru_step(const LayerParams& p, std::span<const double> x, std::span<const double> y_prev,
                   std::span<const double> c_prev, OpCounter& counter, const StepOptions& opt) {
  check_step_shapes(p, x.size(), y_prev.size(), c_prev.size());
  const std::size_t n = p.n;
  EgruStep s;
  s.c.resize(n);
  s.y.resize(n);
  s.gates.u.resize(n);
  s.gates.r.resize(n);
  s.gates.z.resize(n);
  s.fired.resize(n);
  std::vector<SparseEntry> x_nz, y_nz;
  step_into(p, x, y_prev, c_prev, p.thresholds(), {s.c, s.y, s.gates.u, s.gates.r, s.gates.z, s.fired}, counter, opt,
            x_nz, y_nz);
  return s;
}

DiscreteTrace egru_forward(const LayerParams& p, const Mat& inputs, OpCounter& counter, const StepOptions& opt,
                           OpCounter* recurrent) {
  if (inputs.rows() == 0) {
    throw std::invalid_argument("egru_forward: empty input sequence");
  }
  if (inputs.cols() != p.d) {
    throw DimensionError("egru_forward: inputs have " + std::to_string(inputs.cols()) + " columns, layer expects " +
                         std::to_string(p.d));
  }
  const std::size_t T = inputs.rows();
  const std::size_t n = p.n;
  DiscreteTrace tr;
  tr.x = inputs;
  tr.c = Mat(T, n);
  tr.y = Mat(T, n);
  tr.u = Mat(T, n);
  tr.r = Mat(T, n);
  tr.z = Mat(T, n);
  tr.fired.assign(T * n, 0);
  const Vec theta = p.thresholds();
  const Vec zeros(n, 0.0);
  std::vector<SparseEntry> x_nz, y_nz;
  for (std::size_t t = 0; t < T; ++t) {
    const std::span<const double> y_prev = t == 0 ? std::span<const double>(zeros) : tr.y.row(t - 1);
    const std::span<const double> c_prev = t == 0 ? std::span<const double>(zeros) : tr.c.row(t - 1);
    step_into(p, inputs.row(t), y_prev, c_prev, theta,
              {tr.c.row(t), tr.y.row(t), tr.u.row(t), tr.r.row(t), tr.z.row(t),
               std::span<std::uint8_t>(tr.fired.data() + t * n, n)},
              counter, opt, x_nz, y_nz, recurrent);
  }
  return tr;
}

double pseudo_derivative(double c, double theta, double epsilon, double peak) {
  return peak * std::max(0.0, 1.0 - std::abs(c - theta) / epsilon);
}

bool backward_support(const LayerParams& p, const DiscreteTrace& trace, std::size_t t, std::size_t i) {
  return trace.fired_at(t, i) ||
         pseudo_derivative(trace.c(t, i), p.threshold(i), p.config.epsilon, p.config.pd_peak) > 0.0;
}

Gradients egru_backward(const LayerParams& p, const DiscreteTrace& trace, const Mat& dL_dy,
                        std::span<const double> dL_dc_final, OpCounter& counter, const StateGradients& extra) {
  const std::size_t T = trace.steps();
  const std::size_t n = p.n;
  if (trace.units() != n || trace.x.cols() != p.d) {
    throw DimensionError("egru_backward: trace does not match layer shape");
  }
  if (dL_dy.rows() != T || dL_dy.cols() != n) {
    throw DimensionError("egru_backward: dL_dy must be T x n");
  }
  if (!dL_dc_final.empty() && dL_dc_final.size() != n) {
    throw DimensionError("egru_backward: dL_dc_final must have n entries");
  }
  if (extra.dL_dc != nullptr && (extra.dL_dc->rows() != T || extra.dL_dc->cols() != n)) {
    throw DimensionError("egru_backward: dL_dc must be T x n");
  }

  Gradients g = Gradients::zeros_like(p);
  const Vec theta = p.thresholds();
  const double eps = p.config.epsilon;
  const double peak = p.config.pd_peak;
  const bool hard = p.config.reset_mode == ResetMode::hard;

  Vec carry_y(n, 0.0), carry_c(n, 0.0);
  Vec gc(n), ga_u(n), ga_z(n), ga_r(n, 0.0), d_ry(n, 0.0), gtheta(n, 0.0);
  std::vector<std::size_t> fired_prev, support_prev;
  std::vector<SparseEntry> x_nz;

  auto support = [&](std::size_t t, std::size_t i) {
    return trace.fired_at(t, i) || pseudo_derivative(trace.c(t, i), theta[i], eps, peak) > 0.0;
  };

  for (std::size_t tt = T; tt-- > 0;) {
    // total gradient at c_t
    for (std::size_t i = 0; i < n; ++i) {
      double gci = carry_c[i];
      if (tt + 1 == T && !dL_dc_final.empty()) gci += dL_dc_final[i];
      if (extra.dL_dc != nullptr) gci += (*extra.dL_dc)(tt, i);
      const double c = trace.c(tt, i);
      const double pd = pseudo_derivative(c, theta[i], eps, peak);
      if (trace.fired_at(tt, i) || pd > 0.0) {
        const double gy = dL_dy(tt, i) + carry_y[i];
        const double h = trace.fired_at(tt, i) ? 1.0 : 0.0;
        gci += gy * (h + c * pd);
        gtheta[i] -= gy * c * pd;
      }
      gc[i] = gci;
    }

    const bool has_prev = tt > 0;
    fired_prev.clear();
    support_prev.clear();
    if (has_prev) {
      for (std::size_t j = 0; j < n; ++j) {
        if (trace.fired_at(tt - 1, j)) fired_prev.push_back(j);
        if (support(tt - 1, j)) support_prev.push_back(j);
      }
    }

    for (std::size_t i = 0; i < n; ++i) {
      const double u = trace.u(tt, i);
      const double z = trace.z(tt, i);
      const double c_prev = has_prev ? trace.c(tt - 1, i) : 0.0;
      const double y_prev = has_prev ? trace.y(tt - 1, i) : 0.0;
      const double base = hard ? c_prev - y_prev : c_prev;
      ga_u[i] = gc[i] * (z - base) * u * (1.0 - u);
      ga_z[i] = gc[i] * u * (1.0 - z * z);
      carry_c[i] = gc[i] * (1.0 - u);
      carry_y[i] = hard ? -gc[i] * (1.0 - u) : -gc[i];
      ga_r[i] = 0.0;
    }
    counter.adds += 6 * n;

    if (has_prev) {
      const auto& Vu = p.V[kUpdate];
      const auto& Vr = p.V[kReset];
      const auto& Vz = p.V[kCandidate];
      // Transposed products restricted to units that carry gradient at t-1.
      for (std::size_t j : support_prev) {
        double acc_z = 0.0, acc_u = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          acc_z += Vz(i, j) * ga_z[i];
          acc_u += Vu(i, j) * ga_u[i];
        }
        d_ry[j] = acc_z;
        carry_y[j] += acc_z * trace.r(tt, j) + acc_u;
      }
      counter.mac += 2 * n * support_prev.size();
      for (std::size_t j : fired_prev) {
        const double r = trace.r(tt, j);
        ga_r[j] = d_ry[j] * trace.y(tt - 1, j) * r * (1.0 - r);
      }
      for (std::size_t j : support_prev) {
        double acc = 0.0;
        for (std::size_t i : fired_prev) acc += Vr(i, j) * ga_r[i];
        carry_y[j] += acc;
      }
      counter.mac += fired_prev.size() * support_prev.size();

      // Weight gradients: only columns of units that fired at t-1.
      for (std::size_t i = 0; i < n; ++i) {
        auto dVu = g.dV[kUpdate].row(i);
        auto dVz = g.dV[kCandidate].row(i);
        for (std::size_t j : fired_prev) {
          const double y = trace.y(tt - 1, j);
          dVu[j] += ga_u[i] * y;
          dVz[j] += ga_z[i] * (trace.r(tt, j) * y);
        }
      }
      for (std::size_t i : fired_prev) {
        auto dVr = g.dV[kReset].row(i);
        for (std::size_t j : fired_prev) dVr[j] += ga_r[i] * trace.y(tt - 1, j);
      }
      counter.mac += 2 * n * fired_prev.size() + fired_prev.size() * fired_prev.size();
    }

    x_nz.clear();
    const auto xrow = trace.x.row(tt);
    for (std::size_t k = 0; k < xrow.size(); ++k) {
      if (xrow[k] != 0.0) x_nz.push_back({k, xrow[k]});
    }
    for (std::size_t i = 0; i < n; ++i) {
      g.db[kUpdate][i] += ga_u[i];
      g.db[kCandidate][i] += ga_z[i];
      g.db[kReset][i] += ga_r[i];
      auto dUu = g.dU[kUpdate].row(i);
      auto dUz = g.dU[kCandidate].row(i);
      for (const auto& e : x_nz) {
        dUu[e.index] += ga_u[i] * e.value;
        dUz[e.index] += ga_z[i] * e.value;
      }
    }
    counter.mac += 2 * n * x_nz.size();
    for (std::size_t i : fired_prev) {
      auto dUr = g.dU[kReset].row(i);
      for (const auto& e : x_nz) dUr[e.index] += ga_r[i] * e.value;
    }
    counter.mac += fired_prev.size() * x_nz.size();
  }

  if (extra.dL_dtheta != nullptr) {
    for (std::size_t i = 0; i < n; ++i) gtheta[i] += (*extra.dL_dtheta)[i];
  }
  for (std::size_t i = 0; i < n; ++i) {
    g.dtheta_raw[p.raw_index(i)] += gtheta[i] * p.threshold_slope(i);
  }
  return g;
}

}  // namespace egru::discrete
