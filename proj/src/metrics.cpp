#include "egru/metrics.hpp"

#include <cstdio>
#include <stdexcept>

namespace egru::metrics {

namespace {

void require_nonempty(const discrete::DiscreteTrace& trace) {
  if (trace.steps() == 0 || trace.units() == 0) throw std::invalid_argument("sparsity of an empty trace");
}

}  // namespace

double activity_sparsity(const discrete::DiscreteTrace& trace) {
  require_nonempty(trace);
  std::uint64_t events = 0;
  for (auto f : trace.fired) events += f;
  return 1.0 - static_cast<double>(events) / static_cast<double>(trace.fired.size());
}

double backward_sparsity(const discrete::DiscreteTrace& trace, const LayerParams& p) {
  require_nonempty(trace);
  std::uint64_t active = 0;
  for (std::size_t t = 0; t < trace.steps(); ++t) {
    for (std::size_t i = 0; i < trace.units(); ++i) active += discrete::backward_support(p, trace, t, i);
  }
  return 1.0 - static_cast<double>(active) / static_cast<double>(trace.fired.size());
}

std::uint64_t recurrent_mac_from_events(const discrete::DiscreteTrace& trace) {
  std::uint64_t events = 0;
  const std::size_t n = trace.units();
  for (std::size_t t = 0; t + 1 < trace.steps(); ++t) {
    for (std::size_t i = 0; i < n; ++i) events += trace.fired_at(t, i);
  }
  return kNumGates * n * events;
}

void SparsityMeter::add(const discrete::DiscreteTrace& trace, const LayerParams& p, const OpCounter& fwd,
                        const OpCounter& fwd_recurrent) {
  if (trace.units() != n || trace.x.cols() != d) throw DimensionError("SparsityMeter: trace has other dims");
  const std::size_t T = trace.steps();
  unit_steps += T * n;
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t i = 0; i < n; ++i) {
      events += trace.fired_at(t, i);
      support += discrete::backward_support(p, trace, t, i);
    }
    for (std::size_t k = 0; k < d; ++k) event_input += kNumGates * n * (trace.x(t, k) != 0.0);
  }
  dense_recurrent += kNumGates * n * n * (T - 1);
  dense_input += kNumGates * n * d * T;
  event_recurrent += recurrent_mac_from_events(trace);
  forward += fwd;
  forward_recurrent += fwd_recurrent;
}

SparsityMeter& SparsityMeter::operator+=(const SparsityMeter& o) {
  if (n == 0 && d == 0) {
    n = o.n;
    d = o.d;
  }
  unit_steps += o.unit_steps;
  events += o.events;
  support += o.support;
  dense_recurrent += o.dense_recurrent;
  dense_input += o.dense_input;
  event_recurrent += o.event_recurrent;
  event_input += o.event_input;
  forward += o.forward;
  forward_recurrent += o.forward_recurrent;
  backward += o.backward;
  return *this;
}

double SparsityMeter::alpha() const {
  return unit_steps ? 1.0 - static_cast<double>(events) / static_cast<double>(unit_steps) : 1.0;
}

double SparsityMeter::beta() const {
  return unit_steps ? 1.0 - static_cast<double>(support) / static_cast<double>(unit_steps) : 1.0;
}

MacReport effective_mac_report(const SparsityMeter& m) {
  if (m.forward_recurrent.mac != m.event_recurrent) {
    throw std::logic_error("instrumented recurrent MACs (" + std::to_string(m.forward_recurrent.mac) +
                           ") differ from the event count formula (" + std::to_string(m.event_recurrent) + ")");
  }
  if (m.forward.mac != m.event_recurrent + m.event_input) {
    throw std::logic_error("instrumented forward MACs do not split into recurrent and input work");
  }
  MacReport r;
  r.dense_recurrent = m.dense_recurrent;
  r.dense_input = m.dense_input;
  r.dense_total = m.dense_recurrent + m.dense_input;
  r.effective_recurrent = m.event_recurrent;
  r.effective_input = m.event_input;
  r.effective_total = m.forward.mac;
  r.pointwise = m.forward.adds + m.forward.nonlin;
  r.recurrent_ratio = r.dense_recurrent ? static_cast<double>(r.effective_recurrent) / r.dense_recurrent : 0.0;
  r.total_ratio = r.dense_total ? static_cast<double>(r.effective_total) / r.dense_total : 0.0;
  r.alpha = m.alpha();
  r.beta = m.beta();
  return r;
}

CsvWriter::CsvWriter(const std::filesystem::path& path) : out_(path) {
  if (!out_) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out_ << header() << '\n';
  out_.flush();
}

void CsvWriter::write(const MetricsRow& row) {
  out_ << format(row) << '\n';
  out_.flush();
}

const char* CsvWriter::header() {
  return "epoch,train_loss,val_metric,alpha,beta,effective_mac,dense_mac,wall_seconds";
}

std::string CsvWriter::format(const MetricsRow& r) {
  char buf[512];
  std::snprintf(buf, sizeof buf, "%zu,%.10g,%.10g,%.10g,%.10g,%llu,%llu,%.3f", r.epoch, r.train_loss, r.val_metric,
                r.alpha, r.beta, static_cast<unsigned long long>(r.effective_mac),
                static_cast<unsigned long long>(r.dense_mac), r.wall_seconds);
  return buf;
}

}  // namespace egru::metrics
