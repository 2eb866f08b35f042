#pragma once

#include <array>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <vector>

#include "egru/numerics.hpp"
#include "egru/params.hpp"

namespace egru::continuous {

/// State of the hybrid system between events.
struct HybridState {
  double t = 0.0;
  std::array<Vec, kNumGates> a;  ///< activations a_u, a_r, a_z
  Vec c;                          ///< internal state

  static HybridState zeros(std::size_t n);
};

/// External input: at time `s`, channel `channel` receives `value`.
struct InputEvent {
  double s = 0.0;
  std::size_t channel = 0;
  double value = 0.0;
};

enum class EventKind { internal, input };

struct Event {
  double s = 0.0;
  EventKind kind = EventKind::internal;
  std::size_t unit = 0;  ///< firing unit, or input channel
  double value = 0.0;    ///< c_n^- for internal events, x for input events
};

/// Pre/post-event quantities consumed by the adjoint pass. For input events
/// only `event` is filled.
struct EventRecord {
  Event event;
  Vec c_minus;
  Vec r_minus;
  Vec rdot_minus;
  Vec cdot_minus;
  Vec cdot_plus;
  std::array<Vec, kNumGates> a_minus;
};

/// One event-free integration interval. Activations inside are recovered
/// exactly from `a0`; c by cubic Hermite interpolation of the endpoints.
struct FlowSegment {
  double t0 = 0.0, t1 = 0.0;
  std::array<Vec, kNumGates> a0;
  Vec c0, c1, cdot0, cdot1;
};

/// Values seen by the loss at a readout time.
struct ReadoutRecord {
  double t = 0.0;
  Vec c;
  Vec tr;  ///< output traces, empty without an output map
};

enum class StepKind { flow, event, readout };

struct TimelineEntry {
  StepKind kind;
  std::size_t index;  ///< into segments, events or readouts
};

struct Trajectory {
  std::size_t n = 0;
  double T = 0.0;
  std::vector<FlowSegment> segments;
  std::vector<EventRecord> events;  ///< internal and input events in time order
  std::vector<ReadoutRecord> readouts;
  std::vector<TimelineEntry> timeline;
  HybridState final_state;
  Mat output_map;  ///< J x n; empty when no traces are tracked
  double tau_kappa = 1.0;

  std::size_t internal_event_count() const;
};

struct IntegratorConfig {
  double max_step = 0.0;      ///< largest substep; 0 selects tau_m / 20
  double tol_event = 1e-9;    ///< bisection width for crossing times
  std::size_t max_events = 1000000;
};

struct SimConfig {
  IntegratorConfig integ;
  std::vector<double> readout_times;  ///< sorted, within [0, T]
  Mat output_map;                     ///< optional J x n map from events to traces
  double tau_kappa = 1.0;
};

class EventCapExceeded : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// a(t+dt) = -b + (a(t) + b) exp(-dt / tau_s), all gates.
HybridState decay_activations(const HybridState& s, double dt, const LayerParams& p);

/// tau_m dc/dt = u (z - c) at the given activations.
Vec state_derivative(const std::array<Vec, kNumGates>& a, std::span<const double> c, const LayerParams& p);

/// Advances c by `substeps` classical RK4 steps over dt, with activations
/// taken from the exact decay at each stage time.
HybridState flow_c(const HybridState& s, double dt, const LayerParams& p, std::size_t substeps = 1);

struct Crossing {
  std::size_t unit;
  double s;
};

/// Earliest upward threshold crossing within (t, t+dt] of the one-step RK4
/// flow, found by bisection to `tol` and a final secant step. A unit already
/// at or above its threshold fires immediately at t.
std::optional<Crossing> detect_crossing(const HybridState& s, double dt, const LayerParams& p, double tol);

/// Fires unit n: gate activations of every other unit jump by the column n
/// of V scaled by c_n^- (times r_n^- for the candidate gate) and c_n resets.
std::pair<HybridState, EventRecord> apply_internal_event(const HybridState& s, std::size_t n, const LayerParams& p,
                                                         double tol = 1e-6);

/// a_x += U_x[:, channel] * value for all gates; c is unchanged.
HybridState apply_input_event(const HybridState& s, std::size_t channel, double value, const LayerParams& p);

/// Integrates from the zero state over [0, T]. The substep grid is anchored
/// at 0, T, input times and readout times so it never depends on parameters.
Trajectory simulate(const LayerParams& p, const std::vector<InputEvent>& inputs, double T, const SimConfig& cfg = {});

/// c(t) and activations inside a flow segment.
Vec segment_c(const FlowSegment& seg, double t);
std::array<Vec, kNumGates> segment_a(const FlowSegment& seg, double t, const LayerParams& p);

/// Output traces at time t from the internal events before t.
Vec output_traces(const Trajectory& traj, double t);

/// Line-oriented raster: `s kind unit value c_minus`. Input events write "-"
/// in the c_minus column.
void write_raster(std::ostream& os, const Trajectory& traj);

}  // namespace egru::continuous
