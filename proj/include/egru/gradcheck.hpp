#pragma once

#include <optional>
#include <string>

#include "egru/adjoint.hpp"
#include "egru/continuous.hpp"

namespace egru::check {

/// A small continuous-model problem: parameters, input events and a loss on
/// c and the output traces at fixed readout times.
struct ContinuousCase {
  LayerParams params;
  std::vector<continuous::InputEvent> inputs;
  double T = 0.0;
  continuous::SimConfig sim;
  adjoint::LossSpec loss;
};

/// Random instance with n in [2, max_n], two input events and T <= 5 tau_m.
/// Not filtered; see `screen_case`.
ContinuousCase random_continuous_case(std::uint64_t seed, std::size_t max_n = 4);

/// Reasons a case is unsuitable for finite differences, or nullopt if it is
/// usable: no or too many events, an event near a breakpoint, or a crossing
/// with small velocity.
std::optional<std::string> screen_case(const ContinuousCase& c, std::size_t max_events = 6);

struct BlockError {
  std::string name;
  double max_rel = 0.0;
  double max_abs = 0.0;
};

struct GradcheckReport {
  std::vector<BlockError> blocks;
  double max_rel = 0.0;
  std::size_t internal_events = 0;
  bool structure_stable = true;  ///< no perturbation changed the event sequence
  bool passed = false;
};

struct GradcheckOptions {
  double h = 1e-5;
  double rel_tol = 1e-2;
  double abs_floor = 1e-8;
  adjoint::BackwardOptions backward;
};

/// Adjoint gradients against central differences of the re-simulated loss
/// for every entry of V, U and b. Relative errors use the denominator
/// max(|a|, |b|, abs_floor / rel_tol), so differences below abs_floor pass.
GradcheckReport continuous_gradcheck(const ContinuousCase& c, const GradcheckOptions& opt = {});

/// Sparse BPTT against the per-scalar surrogate-graph oracle.
GradcheckReport discrete_gradcheck(std::uint64_t seed, std::size_t max_n, std::size_t max_T, double rel_tol = 1e-9);

}  // namespace egru::check
