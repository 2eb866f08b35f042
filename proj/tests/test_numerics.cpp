#include <random>

#include "doctest.h"
#include "egru/numerics.hpp"

using namespace egru;

namespace {

Mat random_mat(std::size_t r, std::size_t c, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  Mat m(r, c);
  for (auto& x : m.data()) x = dist(rng);
  return m;
}

}  // namespace

TEST_CASE("matvec on identity and zero matrices") {
  OpCounter k;
  Mat eye(2, 2, Vec{1, 0, 0, 1});
  Vec v{3, 4};
  CHECK(matvec_counted(eye, v, k) == Vec{3, 4});
  CHECK(k.mac == 4);
  Mat zero(3, 3);
  CHECK(matvec_counted(zero, Vec{1, 2, 3}, k) == Vec{0, 0, 0});
  CHECK(k.mac == 13);
}

TEST_CASE("matvec matches a scalar double loop") {
  std::mt19937_64 rng(7);
  const Mat m = random_mat(4, 4, rng);
  Vec v{0.3, -1.2, 2.5, 0.01};
  OpCounter k;
  const Vec out = matvec_counted(m, v, k);
  for (std::size_t i = 0; i < 4; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < 4; ++j) acc += m.data()[i * 4 + j] * v[j];
    CHECK(out[i] == acc);
  }
}

TEST_CASE("matvec rejects mismatched shapes") {
  OpCounter k;
  CHECK_THROWS_AS(matvec_counted(Mat(2, 3), Vec{1, 2}, k), DimensionError);
  CHECK_THROWS_AS(Mat(2, 2, Vec{1, 2, 3}), DimensionError);
}

TEST_CASE("sparse matvec") {
  std::mt19937_64 rng(11);
  const Mat m = random_mat(5, 4, rng);
  OpCounter k;

  SUBCASE("empty entry list gives zeros and no work") {
    CHECK(sparse_matvec_counted(m, {}, k) == Vec(5, 0.0));
    CHECK(k.mac == 0);
  }
  SUBCASE("unit entry selects a column") {
    std::vector<SparseEntry> e{{2, 1.0}};
    const Vec out = sparse_matvec_counted(m, e, k);
    for (std::size_t i = 0; i < 5; ++i) CHECK(out[i] == m(i, 2));
    CHECK(k.mac == 5);
  }
  SUBCASE("all columns active is bit-identical to the dense product") {
    Vec v{0.5, -0.25, 1.75, 3.0};
    OpCounter kd;
    const Vec dense = matvec_counted(m, v, kd);
    std::vector<SparseEntry> e;
    for (std::size_t j = 0; j < 4; ++j) e.push_back({j, v[j]});
    CHECK(sparse_matvec_counted(m, e, k) == dense);
    CHECK(k.mac == kd.mac);
  }
  SUBCASE("index out of range") {
    std::vector<SparseEntry> e{{4, 1.0}};
    CHECK_THROWS_AS(sparse_matvec_counted(m, e, k), DimensionError);
  }
}

TEST_CASE("nonzeros lists entries in ascending order") {
  const auto nz = nonzeros(Vec{0, 2, 0, -1});
  REQUIRE(nz.size() == 2);
  CHECK(nz[0].index == 1);
  CHECK(nz[1].index == 3);
  CHECK(nz[1].value == -1);
}

TEST_CASE("scalar nonlinearities") {
  CHECK(sigmoid(0.0) == 0.5);
  CHECK(std::tanh(0.0) == 0.0);
  CHECK(tanh_prime(0.0) == 1.0);
  const double h = 1e-5, x = 0.7;
  const double fd = (sigmoid(x + h) - sigmoid(x - h)) / (2 * h);
  CHECK(std::abs(sigmoid_prime(x) - fd) < 1e-8);
  const double fdt = (std::tanh(x + h) - std::tanh(x - h)) / (2 * h);
  CHECK(std::abs(tanh_prime(x) - fdt) < 1e-8);
  // saturates without overflow
  CHECK(sigmoid(-1000.0) == 0.0);
  CHECK(sigmoid(1000.0) == 1.0);
}

TEST_CASE("counter merge is associative and commutative") {
  OpCounter a{1, 2, 3}, b{10, 20, 30}, c{100, 200, 300};
  CHECK((a + b) + c == a + (b + c));
  CHECK(a + b == b + a);
}
