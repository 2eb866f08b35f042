#pragma once

#include <cstdint>
#include <vector>

#include "egru/numerics.hpp"
#include "egru/params.hpp"

namespace egru::discrete {

/// Gate values of one step.
struct Gates {
  Vec u, r, z;
};

struct GruStep {
  Gates gates;
  Vec y;
};

/// Plain GRU step: y = u*z + (1-u)*y_prev.
GruStep gru_step(const LayerParams& p, std::span<const double> x, std::span<const double> y_prev);

struct StepOptions {
  /// Debug mode: H == 1 everywhere and no -y_prev reset term, which turns the
  /// EGRU recursion back into the GRU recursion with y == c.
  bool force_gru = false;
};

struct EgruStep {
  Vec c;
  Vec y;
  Gates gates;
  std::vector<std::uint8_t> fired;
};

/// One EGRU step. Input and recurrent products only touch the nonzero
/// entries of x and y_prev, so `counter.mac` is the effective MAC count.
EgruStep egru_step(const LayerParams& p, std::span<const double> x, std::span<const double> y_prev,
                   std::span<const double> c_prev, OpCounter& counter, const StepOptions& opt = {});

/// Per-step record of a forward pass, stored as T x n (or T x d) tables.
struct DiscreteTrace {
  Mat x;
  Mat c, y, u, r, z;
  std::vector<std::uint8_t> fired;  ///< T*n flags, row-major

  std::size_t steps() const { return c.rows(); }
  std::size_t units() const { return c.cols(); }
  bool fired_at(std::size_t t, std::size_t i) const { return fired[t * units() + i] != 0; }
};

/// Runs the sequence given as a T x d table of inputs. If `recurrent` is
/// given, the recurrent-product share of `counter.mac` is also added there.
DiscreteTrace egru_forward(const LayerParams& p, const Mat& inputs, OpCounter& counter,
                           const StepOptions& opt = {}, OpCounter* recurrent = nullptr);

/// Triangular surrogate for dH/dc: peak * max(0, 1 - |c - theta| / epsilon).
double pseudo_derivative(double c, double theta, double epsilon, double peak = 1.0);

/// Extra loss terms that act on the internal state rather than the output.
struct StateGradients {
  const Mat* dL_dc = nullptr;   ///< T x n, optional, added at each step
  const Vec* dL_dtheta = nullptr;  ///< n, optional, direct threshold gradient
};

/// Backpropagation through time with the pseudo-derivative in place of
/// dH/dc. `dL_dy` is T x n; `dL_dc_final` has length n (may be empty).
/// Recurrent-product work is skipped for units whose pseudo-derivative and
/// event flag are both zero; `counter.mac` records the work actually done.
Gradients egru_backward(const LayerParams& p, const DiscreteTrace& trace, const Mat& dL_dy,
                        std::span<const double> dL_dc_final, OpCounter& counter,
                        const StateGradients& extra = {});

/// True where a unit-step sits on the backward path through H.
bool backward_support(const LayerParams& p, const DiscreteTrace& trace, std::size_t t, std::size_t i);

}  // namespace egru::discrete
