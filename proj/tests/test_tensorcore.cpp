// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <numbers>
#include <random>

#include "doctest.h"
#include "test_util.hpp"
#include "tokenseek/matrix.hpp"

using namespace tokenseek;
using tokenseek::testing::random_matrix;

TEST_CASE("matmul basic cases") {
  const Matrix id = Matrix::from_rows({{1, 0}, {0, 1}});
  const Matrix a = Matrix::from_rows({{1, 2}, {3, 4}});
  CHECK(matmul(id, a) == a);
  CHECK(matmul(Matrix::from_rows({{1, 2}}), Matrix::from_rows({{3}, {4}})) == Matrix::from_rows({{11}}));
  const Matrix z(2, 2);
  CHECK(matmul(z, Matrix::from_rows({{5, 6, 7}, {8, 9, 1}})) == Matrix(2, 3));
}

TEST_CASE("matmul rejects mismatched shapes and names both") {
  try {
    matmul(Matrix(2, 3), Matrix(2, 3));
    FAIL("expected throw");
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    CHECK(msg.find("2x3") != std::string::npos);
  }
}

TEST_CASE("transpose of product is product of transposes, exactly") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix a = random_matrix(rng, 3, 5);
    const Matrix b = random_matrix(rng, 5, 4);
    CHECK(transpose(matmul(a, b)) == matmul(transpose(b), transpose(a)));
    CHECK(matmul_tn(transpose(a), b) == matmul(a, b));
    CHECK(matmul_nt(a, transpose(b)) == matmul(a, b));
  }
}

TEST_CASE("row_softmax_masked examples") {
  const AllowMask all(2, 2, true);
  const Matrix u = row_softmax_masked(Matrix(2, 2), all);
  CHECK(u == Matrix::from_rows({{0.5, 0.5}, {0.5, 0.5}}));

  const Matrix c = row_softmax_masked(Matrix::from_rows({{9, 7}, {0, 0}}), AllowMask::causal(2));
  CHECK(c == Matrix::from_rows({{1, 0}, {0.5, 0.5}}));

  const Matrix l = row_softmax_masked(Matrix::from_rows({{std::log(2.0), 0.0}}), AllowMask(1, 2, true));
  CHECK(l(0, 0) == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(l(0, 1) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("row_softmax_masked rejects a fully masked row") {
  AllowMask m(2, 2, true);
  m.set(1, 0, false);
  m.set(1, 1, false);
  CHECK_THROWS_AS(row_softmax_masked(Matrix(2, 2), m), std::invalid_argument);
}

TEST_CASE("row_softmax_masked rows sum to one on random inputs") {
  std::mt19937_64 rng(11);
  std::bernoulli_distribution coin(0.6);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + trial % 9, m = 1 + (trial * 7) % 11;
    Matrix s = random_matrix(rng, n, m, 5.0);
    AllowMask mask(n, m, false);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < m; ++j) mask.set(i, j, coin(rng));
      mask.set(i, rng() % m, true);
    }
    const Matrix p = row_softmax_masked(s, mask);
    for (std::size_t i = 0; i < n; ++i) {
      double sum = 0.0;
      for (std::size_t j = 0; j < m; ++j) {
        if (!mask(i, j)) CHECK(p(i, j) == 0.0);
        sum += p(i, j);
      }
      CHECK(std::abs(sum - 1.0) <= 1e-12);
    }
  }
}

TEST_CASE("gelu values") {
  CHECK(gelu(0.0) == 0.0);
  CHECK(std::abs(gelu(10.0) - 10.0) <= 1e-6);
  const Matrix g = gelu_backward(Matrix(1, 1), Matrix(1, 1, 1.0));
  CHECK(g(0, 0) == doctest::Approx(0.5).epsilon(1e-15));
}

namespace {

double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-4}); }

}  // namespace

TEST_CASE("backward kernels match central finite differences") {
  std::mt19937_64 rng(3);
  const double h = 1e-5;
  for (int trial = 0; trial < 5; ++trial) {
    const Matrix x = random_matrix(rng, 3, 4, 1.5);
    const Matrix w = random_matrix(rng, 3, 4);  // weights of the scalar probe sum(w .* f(x))

    auto probe_gelu = [&](const Matrix& in) {
      const Matrix y = gelu(in);
      double s = 0.0;
      for (std::size_t i = 0; i < y.size(); ++i) s += w.data()[i] * y.data()[i];
      return s;
    };
    const AllowMask mask = [] {
      AllowMask m(3, 4, true);
      m.set(0, 3, false);
      m.set(2, 0, false);
      return m;
    }();
    auto probe_softmax = [&](const Matrix& in) {
      const Matrix y = row_softmax_masked(in, mask);
      double s = 0.0;
      for (std::size_t i = 0; i < y.size(); ++i) s += w.data()[i] * y.data()[i];
      return s;
    };
    const Matrix g_gelu = gelu_backward(x, w);
    const Matrix g_soft = row_softmax_backward(row_softmax_masked(x, mask), w);
    for (std::size_t i = 0; i < x.size(); ++i) {
      Matrix xp = x, xm = x;
      xp.data()[i] += h;
      xm.data()[i] -= h;
      CHECK(rel_err(g_gelu.data()[i], (probe_gelu(xp) - probe_gelu(xm)) / (2 * h)) <= 1e-6);
      CHECK(rel_err(g_soft.data()[i], (probe_softmax(xp) - probe_softmax(xm)) / (2 * h)) <= 1e-6);
    }
  }
}

TEST_CASE("stable_log") {
  CHECK(std::abs(stable_log(std::vector<double>{1.0}, 1e-12)[0]) < 1e-11);
  const auto v = stable_log(std::vector<double>{std::numbers::e, std::numbers::e * std::numbers::e}, 1e-300);
  CHECK(v[0] == doctest::Approx(1.0));
  CHECK(v[1] == doctest::Approx(2.0));
  CHECK(stable_log(std::vector<double>{0.0}, 1e-12)[0] == doctest::Approx(-27.631021115928547));
  CHECK_THROWS_AS(stable_log(std::vector<double>{1.0}, 0.0), std::invalid_argument);
}

TEST_CASE("minmax_norm") {
  CHECK(minmax_norm(std::vector<double>{1, 3, 5}, 1e-12) == std::vector<double>{0, 0.5, 1});
  CHECK(minmax_norm(std::vector<double>{7, 7, 7}, 1e-12) == std::vector<double>{0, 0, 0});
  CHECK(minmax_norm(std::vector<double>{-2, 0}, 1e-12) == std::vector<double>{0, 1});
  CHECK_THROWS(minmax_norm(std::vector<double>{}, 1e-12));

  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const Matrix m = random_matrix(rng, 1, 2 + trial % 13, 10.0);
    const auto out = minmax_norm(m.data(), 1e-12);
    CHECK(*std::min_element(out.begin(), out.end()) == 0.0);
    CHECK(*std::max_element(out.begin(), out.end()) == 1.0);
  }
}

TEST_CASE("non-finite results are rejected") {
  Matrix a(1, 1, 1e300);
  CHECK_THROWS_AS(matmul(a, a), std::domain_error);
}
