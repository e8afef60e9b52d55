// SPDX-License-Identifier: Apache-2.0

#include "tokenseek/matrix.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace tokenseek {

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw std::invalid_argument("Matrix: data length " + std::to_string(data_.size()) +
                                " does not match " + shape_str());
  }
}

Matrix Matrix::from_rows(const std::vector<std::vector<double>>& rows) {
  if (rows.empty()) return {};
  Matrix m(rows.size(), rows.front().size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].size() != m.cols()) throw std::invalid_argument("Matrix::from_rows: ragged rows");
    std::copy(rows[r].begin(), rows[r].end(), m.row(r).begin());
  }
  return m;
}

std::string Matrix::shape_str() const {
  return std::to_string(rows_) + "x" + std::to_string(cols_);
}

void Matrix::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

Matrix& Matrix::operator+=(const Matrix& o) {
  if (!same_shape(o)) {
    throw std::invalid_argument("Matrix +=: shape mismatch " + shape_str() + " vs " + o.shape_str());
  }
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
  return *this;
}

Matrix& Matrix::operator*=(double s) {
  for (double& v : data_) v *= s;
  return *this;
}

AllowMask AllowMask::causal(std::size_t n) {
  AllowMask m(n, n, false);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j) m.set(i, j, true);
  return m;
}

void require_finite(const Matrix& m, const char* what) {
  for (double v : m.data()) {
    if (!std::isfinite(v)) throw std::domain_error(std::string(what) + ": non-finite entry");
  }
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw std::invalid_argument("matmul: dimension mismatch " + a.shape_str() + " * " + b.shape_str());
  }
  Matrix c(a.rows(), b.cols());
  const std::size_t n = b.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double* ci = c.row(i).data();
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      const double* bk = b.row(k).data();
      for (std::size_t j = 0; j < n; ++j) ci[j] += aik * bk[j];
    }
  }
  require_finite(c, "matmul");
  return c;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) {
    throw std::invalid_argument("matmul_tn: dimension mismatch " + a.shape_str() + "^T * " + b.shape_str());
  }
  Matrix c(a.cols(), b.cols());
  const std::size_t n = b.cols();
  for (std::size_t k = 0; k < a.rows(); ++k) {
    const double* bk = b.row(k).data();
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double aki = a(k, i);
      double* ci = c.row(i).data();
      for (std::size_t j = 0; j < n; ++j) ci[j] += aki * bk[j];
    }
  }
  require_finite(c, "matmul_tn");
  return c;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw std::invalid_argument("matmul_nt: dimension mismatch " + a.shape_str() + " * " + b.shape_str() + "^T");
  }
  // Same ascending-k accumulation as a dot product, but vectorizes over j.
  const Matrix bt = transpose(b);
  Matrix c(a.rows(), b.rows());
  const std::size_t n = b.rows();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double* ci = c.row(i).data();
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      const double* bk = bt.row(k).data();
      for (std::size_t j = 0; j < n; ++j) ci[j] += aik * bk[j];
    }
  }
  require_finite(c, "matmul_nt");
  return c;
}

Matrix transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

Matrix add(const Matrix& a, const Matrix& b) {
  Matrix c = a;
  c += b;
  return c;
}

Matrix add_row_broadcast(const Matrix& a, const Matrix& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw std::invalid_argument("add_row_broadcast: " + row.shape_str() + " onto " + a.shape_str());
  }
  Matrix c = a;
  for (std::size_t i = 0; i < c.rows(); ++i) {
    auto ci = c.row(i);
    for (std::size_t j = 0; j < c.cols(); ++j) ci[j] += row(0, j);
  }
  return c;
}

Matrix column_sums(const Matrix& a) {
  Matrix s(1, a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) s(0, j) += a(i, j);
  return s;
}

Matrix slice_cols(const Matrix& a, std::size_t begin, std::size_t count) {
  if (begin + count > a.cols()) throw std::out_of_range("slice_cols: range exceeds " + a.shape_str());
  Matrix s(a.rows(), count);
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < count; ++j) s(i, j) = a(i, begin + j);
  return s;
}

void write_cols(Matrix& dst, const Matrix& src, std::size_t begin) {
  if (src.rows() != dst.rows() || begin + src.cols() > dst.cols()) {
    throw std::out_of_range("write_cols: " + src.shape_str() + " into " + dst.shape_str());
  }
  for (std::size_t i = 0; i < src.rows(); ++i)
    for (std::size_t j = 0; j < src.cols(); ++j) dst(i, begin + j) = src(i, j);
}

Matrix gather_rows(const Matrix& a, std::span<const std::size_t> rows) {
  Matrix g(rows.size(), a.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= a.rows()) throw std::out_of_range("gather_rows: row index out of range");
    std::copy(a.row(rows[i]).begin(), a.row(rows[i]).end(), g.row(i).begin());
  }
  return g;
}

Matrix vstack(const Matrix& top, const Matrix& bottom) {
  if (top.rows() == 0) return bottom;
  if (bottom.rows() == 0) return top;
  if (top.cols() != bottom.cols()) {
    throw std::invalid_argument("vstack: " + top.shape_str() + " over " + bottom.shape_str());
  }
  Matrix s(top.rows() + bottom.rows(), top.cols());
  std::copy(top.data().begin(), top.data().end(), s.data().begin());
  std::copy(bottom.data().begin(), bottom.data().end(), s.data().begin() + top.size());
  return s;
}

Matrix row_softmax_masked(const Matrix& scores, const AllowMask& allowed) {
  if (allowed.rows != scores.rows() || allowed.cols != scores.cols()) {
    throw std::invalid_argument("row_softmax_masked: mask shape does not match " + scores.shape_str());
  }
  Matrix p(scores.rows(), scores.cols());
  for (std::size_t i = 0; i < scores.rows(); ++i) {
    double mx = -INFINITY;
    for (std::size_t j = 0; j < scores.cols(); ++j)
      if (allowed(i, j)) mx = std::max(mx, scores(i, j));
    if (mx == -INFINITY) {
      throw std::invalid_argument("row_softmax_masked: row " + std::to_string(i) + " is fully masked");
    }
    double sum = 0.0;
    for (std::size_t j = 0; j < scores.cols(); ++j) {
      if (!allowed(i, j)) continue;
      const double e = std::exp(scores(i, j) - mx);
      p(i, j) = e;
      sum += e;
    }
    for (std::size_t j = 0; j < scores.cols(); ++j) p(i, j) /= sum;
  }
  require_finite(p, "row_softmax_masked");
  return p;
}

Matrix row_softmax_backward(const Matrix& probs, const Matrix& upstream) {
  if (!probs.same_shape(upstream)) {
    throw std::invalid_argument("row_softmax_backward: " + probs.shape_str() + " vs " + upstream.shape_str());
  }
  Matrix g(probs.rows(), probs.cols());
  for (std::size_t i = 0; i < probs.rows(); ++i) {
    double dot = 0.0;
    for (std::size_t j = 0; j < probs.cols(); ++j) dot += probs(i, j) * upstream(i, j);
    for (std::size_t j = 0; j < probs.cols(); ++j) g(i, j) = probs(i, j) * (upstream(i, j) - dot);
  }
  return g;
}

namespace {
constexpr double kGeluC = 0.044715;
const double kSqrt2OverPi = std::sqrt(2.0 / std::numbers::pi);
}  // namespace

double gelu(double x) {
  const double u = kSqrt2OverPi * (x + kGeluC * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(u));
}

double gelu_derivative(double x) {
  const double u = kSqrt2OverPi * (x + kGeluC * x * x * x);
  const double t = std::tanh(u);
  const double du = kSqrt2OverPi * (1.0 + 3.0 * kGeluC * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

Matrix gelu(const Matrix& x) {
  Matrix y(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) y.data()[i] = gelu(x.data()[i]);
  return y;
}

Matrix gelu_backward(const Matrix& x, const Matrix& upstream) {
  if (!x.same_shape(upstream)) {
    throw std::invalid_argument("gelu_backward: " + x.shape_str() + " vs " + upstream.shape_str());
  }
  Matrix g(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) g.data()[i] = upstream.data()[i] * gelu_derivative(x.data()[i]);
  return g;
}

std::vector<double> stable_log(std::span<const double> v, double eps) {
  if (!(eps > 0.0)) throw std::invalid_argument("stable_log: eps must be positive");
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = std::log(v[i] + eps);
  return out;
}

std::vector<double> minmax_norm(std::span<const double> v, double eps) {
  if (v.empty()) throw std::invalid_argument("minmax_norm: empty input");
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  const double range = *hi - *lo;
  std::vector<double> out(v.size(), 0.0);
  if (range < eps) return out;
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = (v[i] - *lo) / range;
  return out;
}

}  // namespace tokenseek
