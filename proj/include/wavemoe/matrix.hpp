#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "wavemoe/errors.hpp"

namespace wavemoe {

/// Dense row-major matrix. The scalar type T is float in the production
/// build and double in the numeric test oracles.
template <typename T>
class Matrix {
public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, T fill = T(0))
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
  T operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  T* row(std::size_t i) { return data_.data() + i * cols_; }
  const T* row(std::size_t i) const { return data_.data() + i * cols_; }

  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  friend bool operator==(const Matrix& a, const Matrix& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

namespace detail {

inline void require_shape(bool ok, const std::string& what) {
  if (!ok) throw ContractError("shape mismatch: " + what);
}

}  // namespace detail

/// y = x * w, accumulating into y (y must be pre-shaped n x out).
template <typename T>
void matmul_add(const Matrix<T>& x, const Matrix<T>& w, Matrix<T>& y) {
  detail::require_shape(x.cols() == w.rows() && y.rows() == x.rows() && y.cols() == w.cols(),
                        "matmul_add");
  const std::size_t n = x.rows(), in = x.cols(), out = w.cols();
  for (std::size_t i = 0; i < n; ++i) {
    const T* xi = x.row(i);
    T* yi = y.row(i);
    for (std::size_t k = 0; k < in; ++k) {
      const T a = xi[k];
      const T* wk = w.row(k);
      for (std::size_t j = 0; j < out; ++j) yi[j] += a * wk[j];
    }
  }
}

/// gx += gy * w^T
template <typename T>
void matmul_add_bt(const Matrix<T>& gy, const Matrix<T>& w, Matrix<T>& gx) {
  detail::require_shape(gy.cols() == w.cols() && gx.rows() == gy.rows() && gx.cols() == w.rows(),
                        "matmul_add_bt");
  const std::size_t n = gy.rows(), out = gy.cols(), in = w.rows();
  for (std::size_t i = 0; i < n; ++i) {
    const T* gi = gy.row(i);
    T* xi = gx.row(i);
    for (std::size_t k = 0; k < in; ++k) {
      const T* wk = w.row(k);
      T acc = T(0);
      for (std::size_t j = 0; j < out; ++j) acc += gi[j] * wk[j];
      xi[k] += acc;
    }
  }
}

/// gw += x^T * gy
template <typename T>
void matmul_add_at(const Matrix<T>& x, const Matrix<T>& gy, Matrix<T>& gw) {
  detail::require_shape(x.rows() == gy.rows() && gw.rows() == x.cols() && gw.cols() == gy.cols(),
                        "matmul_add_at");
  const std::size_t n = x.rows(), in = x.cols(), out = gy.cols();
  for (std::size_t i = 0; i < n; ++i) {
    const T* xi = x.row(i);
    const T* gi = gy.row(i);
    for (std::size_t k = 0; k < in; ++k) {
      const T a = xi[k];
      T* wk = gw.row(k);
      for (std::size_t j = 0; j < out; ++j) wk[j] += a * gi[j];
    }
  }
}

template <typename T>
bool all_finite(const Matrix<T>& m) {
  for (const T v : m.storage())
    if (!std::isfinite(static_cast<double>(v))) return false;
  return true;
}

}  // namespace wavemoe
