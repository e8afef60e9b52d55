// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major matrix of doubles and the handful of kernels the model is
// built from. Every kernel sums in a fixed order so results are
// bit-reproducible.

#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace tokenseek {

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Matrix from_rows(const std::vector<std::vector<double>>& rows);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }

  std::string shape_str() const;
  bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  void fill(double v);
  Matrix& operator+=(const Matrix& o);
  Matrix& operator*=(double s);

  friend bool operator==(const Matrix& a, const Matrix& b) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// Boolean mask stored row-major, same layout as Matrix.
struct AllowMask {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<unsigned char> allowed;

  AllowMask() = default;
  AllowMask(std::size_t r, std::size_t c, bool v) : rows(r), cols(c), allowed(r * c, v ? 1 : 0) {}
  bool operator()(std::size_t r, std::size_t c) const { return allowed[r * cols + c] != 0; }
  void set(std::size_t r, std::size_t c, bool v) { allowed[r * cols + c] = v ? 1 : 0; }

  static AllowMask causal(std::size_t n);
};

// Throws std::invalid_argument with both shapes when a and b cannot be multiplied.
Matrix matmul(const Matrix& a, const Matrix& b);
// a^T * b without materializing the transpose.
Matrix matmul_tn(const Matrix& a, const Matrix& b);
// a * b^T without materializing the transpose.
Matrix matmul_nt(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& a);

Matrix add(const Matrix& a, const Matrix& b);
// Adds a 1 x cols row vector to every row.
Matrix add_row_broadcast(const Matrix& a, const Matrix& row);
// 1 x cols vector of column sums, ascending row order.
Matrix column_sums(const Matrix& a);

Matrix slice_cols(const Matrix& a, std::size_t begin, std::size_t count);
void write_cols(Matrix& dst, const Matrix& src, std::size_t begin);
Matrix gather_rows(const Matrix& a, std::span<const std::size_t> rows);
Matrix vstack(const Matrix& top, const Matrix& bottom);

// Masked entries are exactly zero; each row must have at least one allowed entry.
Matrix row_softmax_masked(const Matrix& scores, const AllowMask& allowed);
// Gradient of the scores given the softmax output and the upstream gradient.
Matrix row_softmax_backward(const Matrix& probs, const Matrix& upstream);

// tanh-approximation GELU.
double gelu(double x);
double gelu_derivative(double x);
Matrix gelu(const Matrix& x);
Matrix gelu_backward(const Matrix& x, const Matrix& upstream);

// ln(v_j + eps).
std::vector<double> stable_log(std::span<const double> v, double eps);
// (v_j - min) / (max - min); all zeros when max - min < eps.
std::vector<double> minmax_norm(std::span<const double> v, double eps);

// Throws std::domain_error naming `what` if any entry is NaN or infinite.
void require_finite(const Matrix& m, const char* what);

}  // namespace tokenseek
