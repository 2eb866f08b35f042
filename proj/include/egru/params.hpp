#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "egru/numerics.hpp"

namespace egru {

/// Gate index into the per-gate parameter arrays.
enum Gate : std::size_t { kUpdate = 0, kReset = 1, kCandidate = 2 };
inline constexpr std::size_t kNumGates = 3;
inline constexpr std::array<const char*, kNumGates> kGateNames = {"u", "r", "z"};

enum class ThresholdMode { per_unit, scalar };
enum class ThresholdTransform { sigmoid, abs };
enum class ResetMode { subtract, hard };

struct ParamConfig {
  ThresholdMode theta_mode = ThresholdMode::per_unit;
  ThresholdTransform theta_transform = ThresholdTransform::sigmoid;
  ResetMode reset_mode = ResetMode::subtract;
  double tau_s = 5.0;
  double tau_m = 1.0;
  double epsilon = 0.5;   ///< pseudo-derivative half-width
  double pd_peak = 1.0;   ///< pseudo-derivative value at the threshold
  double theta_std = 1.4142135623730951;
  double abs_floor = 1e-6;  ///< smallest threshold the abs transform may yield
};

/// Trainable tensors and constants of one EGRU layer.
///
/// Recurrent weights `V[g]` are n x n with row = receiving unit and
/// column = sending unit. Input weights `U[g]` are n x d. Thresholds are
/// stored as raw values and read through the configured positivity
/// transform; the scalar mode keeps a single shared raw value.
struct LayerParams {
  std::size_t n = 0;
  std::size_t d = 0;
  std::array<Mat, kNumGates> V;
  std::array<Mat, kNumGates> U;
  std::array<Vec, kNumGates> b;
  Vec theta_raw;
  ParamConfig config;
  std::uint64_t seed = 0;

  double threshold(std::size_t i) const;
  Vec thresholds() const;
  /// d(threshold)/d(raw) for the raw entry behind unit i.
  double threshold_slope(std::size_t i) const;
  std::size_t raw_index(std::size_t i) const { return config.theta_mode == ThresholdMode::scalar ? 0 : i; }

  std::size_t num_trainable() const;
  /// Throws DimensionError if any tensor disagrees with (n, d).
  void validate() const;
};

/// Accumulator with the same shapes as the trainable fields of LayerParams.
struct Gradients {
  std::array<Mat, kNumGates> dV;
  std::array<Mat, kNumGates> dU;
  std::array<Vec, kNumGates> db;
  Vec dtheta_raw;

  static Gradients zeros_like(const LayerParams& p);
  Gradients& operator+=(const Gradients& o);
  void scale(double s);
  double squared_norm() const;
};

LayerParams init_params(std::size_t n, std::size_t d, std::uint64_t seed, const ParamConfig& config = {});

double apply_threshold_transform(ThresholdTransform t, double raw, double abs_floor);

/// Re-establishes strictly positive thresholds after an optimizer step.
/// The abs transform rewrites raw values in place; sigmoid is positive by
/// construction and leaves raw values untouched.
void enforce_threshold_positivity(LayerParams& p);

std::vector<std::span<double>> param_blocks(LayerParams& p);
std::vector<std::span<double>> grad_blocks(Gradients& g);
std::vector<std::span<const double>> grad_blocks(const Gradients& g);

/// Dense linear readout used by the classification harnesses.
struct Readout {
  Mat W;
  Vec b;
  static Readout init(std::size_t outputs, std::size_t inputs, std::uint64_t seed);
};

struct ReadoutGradients {
  Mat dW;
  Vec db;
  static ReadoutGradients zeros_like(const Readout& r);
  ReadoutGradients& operator+=(const ReadoutGradients& o);
};

/// Checkpoint container: JSON document with named arrays, dims and seed.
void save_checkpoint(const std::filesystem::path& path, const LayerParams& p, const Readout* readout = nullptr);
LayerParams load_checkpoint(const std::filesystem::path& path, Readout* readout = nullptr);

const char* to_string(ThresholdMode m);
const char* to_string(ThresholdTransform t);
const char* to_string(ResetMode m);
ThresholdMode threshold_mode_from_string(const std::string& s);
ThresholdTransform threshold_transform_from_string(const std::string& s);
ResetMode reset_mode_from_string(const std::string& s);

}  // namespace egru
