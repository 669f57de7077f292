#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace attnkit {

/// Dense row-major matrix of 64-bit reals. Rows are sequence positions
/// throughout the engine.
class Matrix {
 public:
  Matrix() = default;
  Matrix(int rows, int cols);  // zero-filled
  Matrix(int rows, int cols, std::vector<double> data);
  Matrix(std::initializer_list<std::initializer_list<double>> rows);

  static Matrix identity(int n);
  static Matrix from_row(std::span<const double> v);

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }

  double& operator()(int i, int j) { return data_[static_cast<std::size_t>(i) * cols_ + j]; }
  double operator()(int i, int j) const { return data_[static_cast<std::size_t>(i) * cols_ + j]; }

  double* row(int i) { return data_.data() + static_cast<std::size_t>(i) * cols_; }
  const double* row(int i) const { return data_.data() + static_cast<std::size_t>(i) * cols_; }
  std::span<const double> row_span(int i) const { return {row(i), static_cast<std::size_t>(cols_)}; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  bool same_shape(const Matrix& other) const {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }
  bool all_finite() const;

  bool operator==(const Matrix& other) const = default;

 private:
  int rows_ = 0;
  int cols_ = 0;
  std::vector<double> data_;
};

std::string shape_string(const Matrix& m);

/// a (m x k) * b (k x n). Throws std::invalid_argument on inner-dim mismatch,
/// naming both operand shapes.
Matrix matmul(const Matrix& a, const Matrix& b);

/// a (m x k) * b^T where b is (n x k). Row-dot kernel; used for Q K^T.
Matrix matmul_abt(const Matrix& a, const Matrix& b);

/// a^T * b where a is (k x m), b is (k x n). Used for weight gradients X^T dY.
Matrix matmul_atb(const Matrix& a, const Matrix& b);

Matrix transpose(const Matrix& m);
Matrix add(const Matrix& a, const Matrix& b);
Matrix sub(const Matrix& a, const Matrix& b);
Matrix scale(const Matrix& m, double s);
Matrix hadamard(const Matrix& a, const Matrix& b);
void add_in_place(Matrix& a, const Matrix& b);
void axpy_in_place(Matrix& a, double s, const Matrix& b);  // a += s*b

/// Adds a 1 x cols bias row to every row of m.
Matrix add_row_broadcast(const Matrix& m, const Matrix& bias);

/// Column sums as a 1 x cols matrix (bias gradients).
Matrix column_sums(const Matrix& m);

double dot(std::span<const double> a, std::span<const double> b);

/// Row-wise softmax with max-subtraction; each output row sums to 1.
Matrix stable_softmax_rows(const Matrix& s);

/// sqrt(sum of squares) == sqrt(tr(M^T M)).
double frobenius_norm(const Matrix& m);

double trace(const Matrix& m);

}  // namespace attnkit
