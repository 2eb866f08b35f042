#pragma once

#include <filesystem>
#include <fstream>
#include <string>

#include "egru/discrete.hpp"

namespace egru::metrics {

/// 1 - (unit-steps with an event) / (n T).
double activity_sparsity(const discrete::DiscreteTrace& trace);

/// 1 - (unit-steps that fired or sit inside the pseudo-derivative support) / (n T).
double backward_sparsity(const discrete::DiscreteTrace& trace, const LayerParams& p);

/// 3 n sum_{t >= 1} |events at t-1|: the recurrent MACs an event-driven
/// forward pass must do.
std::uint64_t recurrent_mac_from_events(const discrete::DiscreteTrace& trace);

/// Running totals over many sequences of one layer.
struct SparsityMeter {
  std::size_t n = 0;
  std::size_t d = 0;
  std::uint64_t unit_steps = 0;
  std::uint64_t events = 0;
  std::uint64_t support = 0;
  std::uint64_t dense_recurrent = 0;
  std::uint64_t dense_input = 0;
  std::uint64_t event_recurrent = 0;  ///< from the event formula
  std::uint64_t event_input = 0;      ///< 3 n |nonzero inputs|
  OpCounter forward;                  ///< as instrumented in the kernels
  OpCounter forward_recurrent;
  OpCounter backward;

  SparsityMeter() = default;
  SparsityMeter(std::size_t n_units, std::size_t d_inputs) : n(n_units), d(d_inputs) {}

  /// Adds one sequence; `fwd` and `fwd_recurrent` are the counters of its forward pass.
  void add(const discrete::DiscreteTrace& trace, const LayerParams& p, const OpCounter& fwd,
           const OpCounter& fwd_recurrent);
  SparsityMeter& operator+=(const SparsityMeter& o);

  double alpha() const;
  double beta() const;
};

struct MacReport {
  std::uint64_t dense_recurrent = 0;
  std::uint64_t dense_input = 0;
  std::uint64_t dense_total = 0;
  std::uint64_t effective_recurrent = 0;
  std::uint64_t effective_input = 0;
  std::uint64_t effective_total = 0;
  std::uint64_t pointwise = 0;   ///< adds + nonlinearities, reported separately
  double recurrent_ratio = 0.0;  ///< effective / dense recurrent MACs
  double total_ratio = 0.0;
  double alpha = 0.0;
  double beta = 0.0;
};

/// Builds the report and checks the instrumented counters against the event
/// formula; a mismatch throws std::logic_error.
MacReport effective_mac_report(const SparsityMeter& meter);

/// One row of the per-epoch metrics file.
struct MetricsRow {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_metric = 0.0;
  double alpha = 0.0;
  double beta = 0.0;
  std::uint64_t effective_mac = 0;
  std::uint64_t dense_mac = 0;
  double wall_seconds = 0.0;
};

class CsvWriter {
 public:
  explicit CsvWriter(const std::filesystem::path& path);
  void write(const MetricsRow& row);

  static const char* header();
  static std::string format(const MetricsRow& row);

 private:
  std::ofstream out_;
};

}  // namespace egru::metrics
