#include "attnkit/matrix.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace attnkit {

namespace {

void check_positive_dims(int rows, int cols) {
  if (rows <= 0 || cols <= 0) {
    throw std::invalid_argument("matrix dims must be positive, got " + std::to_string(rows) +
                                "x" + std::to_string(cols));
  }
}

}  // namespace

Matrix::Matrix(int rows, int cols) : rows_(rows), cols_(cols) {
  check_positive_dims(rows, cols);
  data_.assign(static_cast<std::size_t>(rows) * cols, 0.0);
}

Matrix::Matrix(int rows, int cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  check_positive_dims(rows, cols);
  if (data_.size() != static_cast<std::size_t>(rows) * cols) {
    throw std::invalid_argument("matrix data length " + std::to_string(data_.size()) +
                                " does not match " + std::to_string(rows) + "x" +
                                std::to_string(cols));
  }
}

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows) {
  rows_ = static_cast<int>(rows.size());
  cols_ = rows_ > 0 ? static_cast<int>(rows.begin()->size()) : 0;
  check_positive_dims(rows_, cols_);
  data_.reserve(static_cast<std::size_t>(rows_) * cols_);
  for (const auto& r : rows) {
    if (static_cast<int>(r.size()) != cols_) {
      throw std::invalid_argument("ragged initializer list for matrix");
    }
    data_.insert(data_.end(), r.begin(), r.end());
  }
}

Matrix Matrix::identity(int n) {
  Matrix m(n, n);
  for (int i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::from_row(std::span<const double> v) {
  return Matrix(1, static_cast<int>(v.size()), std::vector<double>(v.begin(), v.end()));
}

bool Matrix::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
}

std::string shape_string(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw std::invalid_argument("matmul shape mismatch: " + shape_string(a) + " * " +
                                shape_string(b));
  }
  const int m = a.rows(), k = a.cols(), n = b.cols();
  Matrix c(m, n);
  for (int i = 0; i < m; ++i) {
    double* __restrict__ crow = c.row(i);
    const double* arow = a.row(i);
    for (int p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* __restrict__ brow = b.row(p);
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

Matrix matmul_abt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw std::invalid_argument("matmul_abt shape mismatch: " + shape_string(a) + " * " +
                                shape_string(b) + "^T");
  }
  const int m = a.rows(), k = a.cols(), n = b.rows();
  Matrix c(m, n);
  // Eight independent accumulator lanes; the explicit reassociation lets the
  // row-dot vectorize without relaxed floating-point semantics.
  const int k8 = k - (k % 8);
  for (int i = 0; i < m; ++i) {
    const double* arow = a.row(i);
    double* crow = c.row(i);
    for (int j = 0; j < n; ++j) {
      const double* brow = b.row(j);
      double acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
      for (int p = 0; p < k8; p += 8) {
        for (int l = 0; l < 8; ++l) acc[l] += arow[p + l] * brow[p + l];
      }
      double dot = ((acc[0] + acc[4]) + (acc[1] + acc[5])) +
                   ((acc[2] + acc[6]) + (acc[3] + acc[7]));
      for (int p = k8; p < k; ++p) dot += arow[p] * brow[p];
      crow[j] = dot;
    }
  }
  return c;
}

Matrix matmul_atb(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) {
    throw std::invalid_argument("matmul_atb shape mismatch: " + shape_string(a) + "^T * " +
                                shape_string(b));
  }
  const int k = a.rows(), m = a.cols(), n = b.cols();
  Matrix c(m, n);
  for (int r = 0; r < k; ++r) {
    const double* arow = a.row(r);
    const double* __restrict__ brow = b.row(r);
    for (int i = 0; i < m; ++i) {
      const double av = arow[i];
      double* __restrict__ crow = c.row(i);
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

Matrix transpose(const Matrix& m) {
  Matrix t(m.cols(), m.rows());
  for (int i = 0; i < m.rows(); ++i)
    for (int j = 0; j < m.cols(); ++j) t(j, i) = m(i, j);
  return t;
}

namespace {

void check_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (!a.same_shape(b)) {
    throw std::invalid_argument(std::string(op) + " shape mismatch: " + shape_string(a) +
                                " vs " + shape_string(b));
  }
}

}  // namespace

Matrix add(const Matrix& a, const Matrix& b) {
  check_same_shape(a, b, "add");
  Matrix c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c.data()[i] += b.data()[i];
  return c;
}

Matrix sub(const Matrix& a, const Matrix& b) {
  check_same_shape(a, b, "sub");
  Matrix c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c.data()[i] -= b.data()[i];
  return c;
}

Matrix scale(const Matrix& m, double s) {
  Matrix c = m;
  for (std::size_t i = 0; i < c.size(); ++i) c.data()[i] *= s;
  return c;
}

Matrix hadamard(const Matrix& a, const Matrix& b) {
  check_same_shape(a, b, "hadamard");
  Matrix c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c.data()[i] *= b.data()[i];
  return c;
}

void add_in_place(Matrix& a, const Matrix& b) {
  check_same_shape(a, b, "add_in_place");
  for (std::size_t i = 0; i < a.size(); ++i) a.data()[i] += b.data()[i];
}

void axpy_in_place(Matrix& a, double s, const Matrix& b) {
  check_same_shape(a, b, "axpy_in_place");
  for (std::size_t i = 0; i < a.size(); ++i) a.data()[i] += s * b.data()[i];
}

Matrix add_row_broadcast(const Matrix& m, const Matrix& bias) {
  if (bias.rows() != 1 || bias.cols() != m.cols()) {
    throw std::invalid_argument("add_row_broadcast: bias " + shape_string(bias) +
                                " incompatible with " + shape_string(m));
  }
  Matrix c = m;
  const double* b = bias.row(0);
  for (int i = 0; i < c.rows(); ++i) {
    double* r = c.row(i);
    for (int j = 0; j < c.cols(); ++j) r[j] += b[j];
  }
  return c;
}

Matrix column_sums(const Matrix& m) {
  Matrix s(1, m.cols());
  double* out = s.row(0);
  for (int i = 0; i < m.rows(); ++i) {
    const double* r = m.row(i);
    for (int j = 0; j < m.cols(); ++j) out[j] += r[j];
  }
  return s;
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw std::invalid_argument("dot length mismatch: " + std::to_string(a.size()) + " vs " +
                                std::to_string(b.size()));
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

Matrix stable_softmax_rows(const Matrix& s) {
  Matrix out(s.rows(), s.cols());
  for (int i = 0; i < s.rows(); ++i) {
    const double* x = s.row(i);
    double* y = out.row(i);
    double mx = x[0];
    for (int j = 1; j < s.cols(); ++j) mx = std::max(mx, x[j]);
    double sum = 0.0;
    for (int j = 0; j < s.cols(); ++j) {
      y[j] = std::exp(x[j] - mx);
      sum += y[j];
    }
    const double inv = 1.0 / sum;
    for (int j = 0; j < s.cols(); ++j) y[j] *= inv;
  }
  return out;
}

double frobenius_norm(const Matrix& m) {
  double acc = 0.0;
  for (std::size_t i = 0; i < m.size(); ++i) acc += m.data()[i] * m.data()[i];
  return std::sqrt(acc);
}

double trace(const Matrix& m) {
  if (m.rows() != m.cols()) {
    throw std::invalid_argument("trace requires a square matrix, got " + shape_string(m));
  }
  double acc = 0.0;
  for (int i = 0; i < m.rows(); ++i) acc += m(i, i);
  return acc;
}

}  // namespace attnkit
