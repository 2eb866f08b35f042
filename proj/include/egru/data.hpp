#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <vector>

#include "egru/continuous.hpp"
#include "egru/numerics.hpp"

namespace egru::data {

/// Timing of the delay-copy task, in model time units.
struct DelayCopyConfig {
  std::size_t n_bits = 2;
  double input_time = 0.5;     ///< bits arrive here, inside the input window
  double input_window = 1.0;
  double delay = 5.0;          ///< cue arrives at input_window + delay
  double recall_window = 2.0;  ///< readout at cue + recall_window
  double value = 1.0;          ///< input event amplitude
};

struct DelayCopySample {
  std::vector<continuous::InputEvent> inputs;  ///< bit j on channel j, cue on channel n_bits
  Vec target;
  double cue_time = 0.0;
  double readout_time = 0.0;
};

DelayCopySample delay_copy_sample(const DelayCopyConfig& cfg, const std::vector<int>& bits);

/// `count` samples with uniformly random bit patterns.
std::vector<DelayCopySample> delay_copy_gen(const DelayCopyConfig& cfg, std::size_t count, std::uint64_t seed);

/// Every one of the 2^n_bits patterns, in binary counting order.
std::vector<DelayCopySample> delay_copy_all_patterns(const DelayCopyConfig& cfg);

/// Step-wise version: row k holds the inputs that arrive in [k dt, (k+1) dt).
Mat delay_copy_discrete(const DelayCopySample& s, std::size_t n_bits, double dt);

class IdxFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct MnistSet {
  std::size_t rows = 0, cols = 0;
  Mat images;  ///< count x (rows*cols), scaled to [0, 1]
  std::vector<std::uint8_t> labels;

  std::size_t size() const { return labels.size(); }
};

/// Reads an IDX image/label pair, gzip-compressed or not.
MnistSet mnist_idx_load(const std::filesystem::path& images, const std::filesystem::path& labels);

/// Max over factor x factor blocks of a row-major rows x cols image.
Vec maxpool_downscale(std::span<const double> image, std::size_t rows, std::size_t cols, std::size_t factor);

/// One scalar input per pixel in row-major order: a (rows*cols) x 1 table.
Mat sequentialize(std::span<const double> image);

/// Every image of a set pooled by `factor`.
MnistSet downscale_set(const MnistSet& s, std::size_t factor);

}  // namespace egru::data
