#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cntlora/error.hpp"

namespace cntlora {

/// Dense row-major matrix of doubles. All initialization math runs in 64-bit
/// precision; construction from external data rejects NaN/Inf.
class Matrix {
 public:
  Matrix() = default;

  Matrix(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}

  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw Error(ErrorCode::ShapeMismatch, "data length " + std::to_string(data_.size()) +
                                                " != " + std::to_string(rows_) + "x" +
                                                std::to_string(cols_));
    }
    for (double v : data_) {
      if (!std::isfinite(v)) throw Error(ErrorCode::NonFinite, "matrix entry is not finite");
    }
  }

  Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) throw Error(ErrorCode::ShapeMismatch, "ragged initializer list");
      data_.insert(data_.end(), r.begin(), r.end());
    }
    for (double v : data_) {
      if (!std::isfinite(v)) throw Error(ErrorCode::NonFinite, "matrix entry is not finite");
    }
  }

  static Matrix identity(std::size_t n) { return eye(n, n); }

  /// Rectangular identity: ones on the leading diagonal.
  static Matrix eye(std::size_t rows, std::size_t cols) {
    Matrix m(rows, cols);
    for (std::size_t i = 0; i < std::min(rows, cols); ++i) m(i, i) = 1.0;
    return m;
  }

  static Matrix diag(std::span<const double> values) {
    Matrix m(values.size(), values.size());
    for (std::size_t i = 0; i < values.size(); ++i) m(i, i) = values[i];
    return m;
  }

  static Matrix diag(std::initializer_list<double> values) {
    return diag(std::span<const double>(values.begin(), values.size()));
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t i, std::size_t j) noexcept { return data_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const noexcept { return data_[i * cols_ + j]; }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }

  std::span<double> row(std::size_t i) noexcept { return {data_.data() + i * cols_, cols_}; }
  std::span<const double> row(std::size_t i) const noexcept {
    return {data_.data() + i * cols_, cols_};
  }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  Matrix transpose() const {
    Matrix t(cols_, rows_);
    for (std::size_t i = 0; i < rows_; ++i)
      for (std::size_t j = 0; j < cols_; ++j) t(j, i) = (*this)(i, j);
    return t;
  }

  /// Rows [r0, r0+n) as a copy.
  Matrix row_block(std::size_t r0, std::size_t n) const {
    if (r0 + n > rows_) throw Error(ErrorCode::ShapeMismatch, "row block out of range");
    Matrix out(n, cols_);
    std::copy(data_.begin() + static_cast<std::ptrdiff_t>(r0 * cols_),
              data_.begin() + static_cast<std::ptrdiff_t>((r0 + n) * cols_), out.data_.begin());
    return out;
  }

  /// Columns [c0, c0+n) as a copy.
  Matrix col_block(std::size_t c0, std::size_t n) const {
    if (c0 + n > cols_) throw Error(ErrorCode::ShapeMismatch, "column block out of range");
    Matrix out(rows_, n);
    for (std::size_t i = 0; i < rows_; ++i)
      for (std::size_t j = 0; j < n; ++j) out(i, j) = (*this)(i, c0 + j);
    return out;
  }

  Matrix& operator+=(const Matrix& o) {
    require_same_shape(o, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

  Matrix& operator-=(const Matrix& o) {
    require_same_shape(o, "-=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
    return *this;
  }

  Matrix& operator*=(double s) noexcept {
    for (double& v : data_) v *= s;
    return *this;
  }

  friend Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
  friend Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
  friend Matrix operator*(Matrix a, double s) { return a *= s; }
  friend Matrix operator*(double s, Matrix a) { return a *= s; }
  friend Matrix operator-(Matrix a) { return a *= -1.0; }

  friend Matrix operator*(const Matrix& a, const Matrix& b) {
    if (a.cols_ != b.rows_) {
      throw Error(ErrorCode::ShapeMismatch, "matmul " + a.shape_string() + " * " + b.shape_string());
    }
    Matrix c(a.rows_, b.cols_);
    for (std::size_t i = 0; i < a.rows_; ++i) {
      double* crow = c.data_.data() + i * c.cols_;
      for (std::size_t l = 0; l < a.cols_; ++l) {
        const double ail = a(i, l);
        if (ail == 0.0) continue;
        const double* brow = b.data_.data() + l * b.cols_;
        for (std::size_t j = 0; j < b.cols_; ++j) crow[j] += ail * brow[j];
      }
    }
    return c;
  }

  /// Bitwise-equal shape and values.
  friend bool operator==(const Matrix& a, const Matrix& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

  std::string shape_string() const {
    return "(" + std::to_string(rows_) + "x" + std::to_string(cols_) + ")";
  }

 private:
  void require_same_shape(const Matrix& o, const char* op) const {
    if (rows_ != o.rows_ || cols_ != o.cols_) {
      throw Error(ErrorCode::ShapeMismatch,
                  std::string(op) + " " + shape_string() + " vs " + o.shape_string());
    }
  }

  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline double frobenius_norm(const Matrix& m) {
  double s = 0.0;
  for (double v : m.data()) s += v * v;
  return std::sqrt(s);
}

inline double max_abs(const Matrix& m) {
  double s = 0.0;
  for (double v : m.data()) s = std::max(s, std::abs(v));
  return s;
}

/// Frobenius inner product <a, b>.
inline double frobenius_dot(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw Error(ErrorCode::ShapeMismatch, "dot " + a.shape_string() + " vs " + b.shape_string());
  }
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a.data()[i] * b.data()[i];
  return s;
}

/// Horizontal concatenation [a | b | ...]; all parts must share a row count.
inline Matrix hcat(std::span<const Matrix> parts) {
  if (parts.empty()) return {};
  std::size_t rows = parts.front().rows();
  std::size_t cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw Error(ErrorCode::ShapeMismatch, "hcat row count mismatch");
    cols += p.cols();
  }
  Matrix out(rows, cols);
  std::size_t c0 = 0;
  for (const auto& p : parts) {
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < p.cols(); ++j) out(i, c0 + j) = p(i, j);
    c0 += p.cols();
  }
  return out;
}

/// M * M^T, exploiting symmetry.
inline Matrix gram(const Matrix& m) {
  Matrix g(m.rows(), m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto ri = m.row(i);
    for (std::size_t j = 0; j <= i; ++j) {
      auto rj = m.row(j);
      double s = 0.0;
      for (std::size_t l = 0; l < m.cols(); ++l) s += ri[l] * rj[l];
      g(i, j) = s;
      g(j, i) = s;
    }
  }
  return g;
}

}  // namespace cntlora
