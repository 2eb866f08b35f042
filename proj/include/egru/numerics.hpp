#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace egru {

using Vec = std::vector<double>;

/// Thrown when operand shapes disagree.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Dense row-major matrix of doubles.
class Mat {
 public:
  Mat() = default;
  Mat(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Mat(std::size_t rows, std::size_t cols, Vec data);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  Vec& data() { return data_; }
  const Vec& data() const { return data_; }

  Mat transposed() const;
  void fill(double v);

  friend bool operator==(const Mat&, const Mat&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  Vec data_;
};

/// Operation tallies. `mac` counts multiply-accumulates inside matrix
/// products; `adds` and `nonlin` count pointwise work.
struct OpCounter {
  std::uint64_t mac = 0;
  std::uint64_t adds = 0;
  std::uint64_t nonlin = 0;

  OpCounter& operator+=(const OpCounter& o) {
    mac += o.mac;
    adds += o.adds;
    nonlin += o.nonlin;
    return *this;
  }
  friend OpCounter operator+(OpCounter a, const OpCounter& b) { return a += b; }
  friend bool operator==(const OpCounter&, const OpCounter&) = default;
};

/// Sparse input to a matrix product: column index and the value it is scaled by.
struct SparseEntry {
  std::size_t index;
  double value;
};

Vec matvec_counted(const Mat& m, std::span<const double> v, OpCounter& counter);

/// Sum of `value * column(index)` over the entries, in the given order.
Vec sparse_matvec_counted(const Mat& m, std::span<const SparseEntry> entries, OpCounter& counter);

/// Nonzero entries of `v` in ascending index order.
std::vector<SparseEntry> nonzeros(std::span<const double> v);

inline double sigmoid(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}
inline double sigmoid_prime(double x) {
  const double s = sigmoid(x);
  return s * (1.0 - s);
}
inline double tanh_prime(double x) {
  const double t = std::tanh(x);
  return 1.0 - t * t;
}

double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> a);
bool all_finite(std::span<const double> a);

}  // namespace egru
