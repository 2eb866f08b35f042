#pragma once

// Minimal reverse-mode tape over scalars. Used only as an independent
// oracle for the hand-written backward passes.

#include <cmath>
#include <cstddef>
#include <vector>

namespace egru::check {

class Tape {
 public:
  struct Var {
    std::size_t id;
  };

  Var constant(double v) { return push(v, {}); }
  Var leaf(double v) { return push(v, {}); }

  double value(Var a) const { return nodes_[a.id].value; }

  Var add(Var a, Var b) { return push(value(a) + value(b), {{a.id, 1.0}, {b.id, 1.0}}); }
  Var sub(Var a, Var b) { return push(value(a) - value(b), {{a.id, 1.0}, {b.id, -1.0}}); }
  Var mul(Var a, Var b) { return push(value(a) * value(b), {{a.id, value(b)}, {b.id, value(a)}}); }
  Var scale(Var a, double s) { return push(value(a) * s, {{a.id, s}}); }
  Var sigmoid(Var a) {
    const double s = 1.0 / (1.0 + std::exp(-value(a)));
    return push(s, {{a.id, s * (1.0 - s)}});
  }
  Var tanh(Var a) {
    const double t = std::tanh(value(a));
    return push(t, {{a.id, 1.0 - t * t}});
  }
  Var abs_floor(Var a, double floor) {
    const double v = value(a);
    if (std::abs(v) < floor) return push(floor, {{a.id, 0.0}});
    return push(std::abs(v), {{a.id, v < 0 ? -1.0 : 1.0}});
  }
  /// y = c * H(c - theta) with the triangular surrogate as dH/dc.
  Var spike(Var c, Var theta, double eps, double peak) {
    const double cv = value(c), tv = value(theta);
    const double h = cv > tv ? 1.0 : 0.0;
    const double pd = peak * std::fmax(0.0, 1.0 - std::abs(cv - tv) / eps);
    return push(cv * h, {{c.id, h + cv * pd}, {theta.id, -cv * pd}});
  }

  /// Reverse sweep seeded with d(out)/d(out) = 1. Returns adjoints of all nodes.
  std::vector<double> grad(Var out) const {
    std::vector<double> g(nodes_.size(), 0.0);
    g[out.id] = 1.0;
    for (std::size_t k = nodes_.size(); k-- > 0;) {
      if (g[k] == 0.0) continue;
      for (const auto& e : nodes_[k].parents) g[e.id] += g[k] * e.d;
    }
    return g;
  }

 private:
  struct Edge {
    std::size_t id;
    double d;
  };
  struct Node {
    double value;
    std::vector<Edge> parents;
  };
  Var push(double v, std::vector<Edge> parents) {
    nodes_.push_back({v, std::move(parents)});
    return {nodes_.size() - 1};
  }
  std::vector<Node> nodes_;
};

}  // namespace egru::check
