#pragma once

// Random small discrete-model instances shared by unit and acceptance tests.

#include <random>

#include "egru/params.hpp"

namespace egru::check {

struct DiscreteCase {
  egru::LayerParams params;
  egru::Mat inputs;
  egru::Mat wy;
  std::vector<double> wc_final;
};

/// Weights are scaled up so that events and surrogate support both occur.
inline DiscreteCase random_discrete_case(std::uint64_t seed, std::size_t max_n = 4, std::size_t max_T = 6) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick_n(1, max_n), pick_T(1, max_T), pick_d(1, 3);
  std::uniform_real_distribution<double> unif(-1.0, 1.0);
  const std::size_t n = pick_n(rng), T = pick_T(rng), d = pick_d(rng);
  egru::ParamConfig cfg;
  cfg.reset_mode = seed % 3 == 0 ? egru::ResetMode::hard : egru::ResetMode::subtract;
  cfg.theta_mode = seed % 4 == 1 ? egru::ThresholdMode::scalar : egru::ThresholdMode::per_unit;
  cfg.theta_transform = seed % 5 == 2 ? egru::ThresholdTransform::abs : egru::ThresholdTransform::sigmoid;
  DiscreteCase c{egru::init_params(n, d, seed, cfg), egru::Mat(T, d), egru::Mat(T, n), std::vector<double>(n)};
  for (std::size_t g = 0; g < egru::kNumGates; ++g) {
    for (auto& w : c.params.V[g].data()) w *= 2.5;
    for (auto& w : c.params.U[g].data()) w *= 2.5;
    for (auto& w : c.params.b[g]) w *= 2.0;
  }
  c.params.b[egru::kCandidate] = std::vector<double>(n, 0.8);
  for (auto& t : c.params.theta_raw) t = 0.5 * unif(rng) - 0.5;
  for (auto& x : c.inputs.data()) x = rng() % 3 == 0 ? 0.0 : unif(rng);
  for (auto& w : c.wy.data()) w = unif(rng);
  for (auto& w : c.wc_final) w = unif(rng);
  return c;
}

}  // namespace egru::check
