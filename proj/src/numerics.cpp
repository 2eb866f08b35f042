#include "egru/numerics.hpp"

#include <algorithm>

namespace egru {

Mat::Mat(std::size_t rows, std::size_t cols, Vec data) : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw DimensionError("Mat: data length " + std::to_string(data_.size()) + " != " +
                         std::to_string(rows_) + "x" + std::to_string(cols_));
  }
}

Mat Mat::transposed() const {
  Mat t(cols_, rows_);
  for (std::size_t r = 0; r < rows_; ++r) {
    for (std::size_t c = 0; c < cols_; ++c) {
      t(c, r) = (*this)(r, c);
    }
  }
  return t;
}

void Mat::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

Vec matvec_counted(const Mat& m, std::span<const double> v, OpCounter& counter) {
  if (v.size() != m.cols()) {
    throw DimensionError("matvec: matrix has " + std::to_string(m.cols()) + " columns, vector has " +
                         std::to_string(v.size()) + " entries");
  }
  Vec out(m.rows(), 0.0);
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const auto row = m.row(r);
    double acc = 0.0;
    for (std::size_t c = 0; c < row.size(); ++c) {
      acc += row[c] * v[c];
    }
    out[r] = acc;
  }
  counter.mac += m.rows() * m.cols();
  return out;
}

Vec sparse_matvec_counted(const Mat& m, std::span<const SparseEntry> entries, OpCounter& counter) {
  Vec out(m.rows(), 0.0);
  for (const auto& e : entries) {
    if (e.index >= m.cols()) {
      throw DimensionError("sparse_matvec: column index " + std::to_string(e.index) + " out of range (" +
                           std::to_string(m.cols()) + " columns)");
    }
  }
  // Row-outer keeps each row's accumulation in entry order, identical to the
  // dense loop when all columns are present.
  for (std::size_t r = 0; r < m.rows(); ++r) {
    double acc = 0.0;
    for (const auto& e : entries) {
      acc += m(r, e.index) * e.value;
    }
    out[r] = acc;
  }
  counter.mac += m.rows() * entries.size();
  return out;
}

std::vector<SparseEntry> nonzeros(std::span<const double> v) {
  std::vector<SparseEntry> out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (v[i] != 0.0) {
      out.push_back({i, v[i]});
    }
  }
  return out;
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw DimensionError("dot: length mismatch");
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    acc += a[i] * b[i];
  }
  return acc;
}

double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

bool all_finite(std::span<const double> a) {
  return std::all_of(a.begin(), a.end(), [](double x) { return std::isfinite(x); });
}

}  // namespace egru
