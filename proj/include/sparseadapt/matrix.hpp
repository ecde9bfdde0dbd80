#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <string>
#include <vector>

#include "sparseadapt/errors.hpp"

namespace sparseadapt {

/// Dense row-major matrix of doubles. The single value type for weights,
/// deltas, gradients and score fields. All training math is f64.
struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> data;  // rows*cols, row-major

  Matrix() = default;

  Matrix(int r, int c) : rows(r), cols(c) {
    if (r <= 0 || c <= 0) {
      throw InputError("Matrix dims must be positive, got " + shape_str(r, c));
    }
    data.assign(static_cast<size_t>(r) * c, 0.0);
  }

  static Matrix zeros(int r, int c) { return Matrix(r, c); }

  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> vals) {
    const int r = static_cast<int>(vals.size());
    const int c = r > 0 ? static_cast<int>(vals.begin()->size()) : 0;
    Matrix m(r, c);
    int i = 0;
    for (const auto& row : vals) {
      if (static_cast<int>(row.size()) != c) {
        throw InputError("ragged initializer for Matrix");
      }
      int j = 0;
      for (double v : row) m.at(i, j++) = v;
      ++i;
    }
    return m;
  }

  double& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
  double at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }

  size_t size() const { return data.size(); }

  bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }

  bool all_finite() const {
    for (double v : data) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  std::string shape() const { return shape_str(rows, cols); }

  static std::string shape_str(int r, int c) {
    return std::to_string(r) + "x" + std::to_string(c);
  }

  bool operator==(const Matrix& o) const {
    return rows == o.rows && cols == o.cols && data == o.data;
  }
};

inline void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (!a.same_shape(b)) {
    throw DimensionError(std::string(op) + ": shape mismatch " + a.shape() + " vs " + b.shape());
  }
}

/// Standard product. Throws DimensionError (with both shapes) unless a.cols == b.rows.
inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols != b.rows) {
    throw DimensionError("matmul: inner dims disagree, " + a.shape() + " x " + b.shape());
  }
  Matrix out(a.rows, b.cols);
  const int n = a.cols, m = b.cols;
  for (int i = 0; i < a.rows; ++i) {
    const double* arow = &a.data[static_cast<size_t>(i) * n];
    double* orow = &out.data[static_cast<size_t>(i) * m];
    for (int k = 0; k < n; ++k) {
      const double aik = arow[k];
      const double* brow = &b.data[static_cast<size_t>(k) * m];
      for (int j = 0; j < m; ++j) orow[j] += aik * brow[j];
    }
  }
  return out;
}

inline Matrix transpose(const Matrix& a) {
  Matrix out(a.cols, a.rows);
  for (int i = 0; i < a.rows; ++i)
    for (int j = 0; j < a.cols; ++j) out.at(j, i) = a.at(i, j);
  return out;
}

inline Matrix add(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "add");
  Matrix out = a;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += b.data[i];
  return out;
}

inline Matrix sub(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "sub");
  Matrix out = a;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] -= b.data[i];
  return out;
}

inline Matrix hadamard(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "hadamard");
  Matrix out = a;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= b.data[i];
  return out;
}

inline Matrix scale(const Matrix& a, double s) {
  Matrix out = a;
  for (double& v : out.data) v *= s;
  return out;
}

inline double max_abs(const Matrix& a) {
  double m = 0.0;
  for (double v : a.data) m = std::max(m, std::fabs(v));
  return m;
}

inline double frobenius_norm(const Matrix& a) {
  double s = 0.0;
  for (double v : a.data) s += v * v;
  return std::sqrt(s);
}

}  // namespace sparseadapt
