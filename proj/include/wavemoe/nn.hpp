#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "wavemoe/matrix.hpp"

namespace wavemoe::nn {

inline constexpr double kRmsNormEps = 1e-6;
inline constexpr double kRotaryBase = 10000.0;

/// Affine map y = x * w + b with w stored [in x out] and b as a 1 x out row.
template <typename T>
struct Linear {
  Matrix<T> w;
  Matrix<T> b;

  Linear() = default;
  Linear(std::size_t in, std::size_t out) : w(in, out), b(1, out) {}

  std::size_t in_dim() const { return w.rows(); }
  std::size_t out_dim() const { return w.cols(); }
};

template <typename T>
Matrix<T> linear_forward(const Linear<T>& p, const Matrix<T>& x) {
  Matrix<T> y(x.rows(), p.out_dim());
  for (std::size_t i = 0; i < y.rows(); ++i)
    for (std::size_t j = 0; j < y.cols(); ++j) y(i, j) = p.b(0, j);
  matmul_add(x, p.w, y);
  return y;
}

/// Accumulates parameter grads into `grad` and input grads into `gx`.
template <typename T>
void linear_backward(const Linear<T>& p, const Matrix<T>& x, const Matrix<T>& gy,
                     Linear<T>& grad, Matrix<T>& gx) {
  matmul_add_at(x, gy, grad.w);
  for (std::size_t i = 0; i < gy.rows(); ++i)
    for (std::size_t j = 0; j < gy.cols(); ++j) grad.b(0, j) += gy(i, j);
  matmul_add_bt(gy, p.w, gx);
}

// Sigmoid-form GELU: x * sigmoid(1.702 x). Smooth everywhere, one exp per
// evaluation, and the backward below matches this exact definition.
inline constexpr double kGeluSlope = 1.702;

template <typename T>
T gelu(T x) {
  const double xd = static_cast<double>(x);
  return static_cast<T>(xd / (1.0 + std::exp(-kGeluSlope * xd)));
}

template <typename T>
T gelu_grad(T x) {
  const double xd = static_cast<double>(x);
  const double s = 1.0 / (1.0 + std::exp(-kGeluSlope * xd));
  return static_cast<T>(s + xd * kGeluSlope * s * (1.0 - s));
}

/// Row-wise RMS normalization with learned gains: y = gain .* x / rms(x).
/// Writes 1/rms per row into inv_rms for the backward pass.
template <typename T>
Matrix<T> rmsnorm_forward(const Matrix<T>& x, const Matrix<T>& gain, std::vector<T>& inv_rms) {
  const std::size_t n = x.rows(), d = x.cols();
  Matrix<T> y(n, d);
  inv_rms.assign(n, T(0));
  for (std::size_t i = 0; i < n; ++i) {
    double ms = 0.0;
    const T* xi = x.row(i);
    for (std::size_t j = 0; j < d; ++j) ms += static_cast<double>(xi[j]) * xi[j];
    const T s = static_cast<T>(1.0 / std::sqrt(ms / static_cast<double>(d) + kRmsNormEps));
    inv_rms[i] = s;
    T* yi = y.row(i);
    for (std::size_t j = 0; j < d; ++j) yi[j] = gain(0, j) * xi[j] * s;
  }
  return y;
}

template <typename T>
void rmsnorm_backward(const Matrix<T>& x, const Matrix<T>& gain, const std::vector<T>& inv_rms,
                      const Matrix<T>& gy, Matrix<T>& ggain, Matrix<T>& gx) {
  const std::size_t n = x.rows(), d = x.cols();
  for (std::size_t i = 0; i < n; ++i) {
    const T s = inv_rms[i];
    const T* xi = x.row(i);
    const T* gi = gy.row(i);
    T dot = T(0);
    for (std::size_t j = 0; j < d; ++j) {
      ggain(0, j) += gi[j] * xi[j] * s;
      dot += gi[j] * gain(0, j) * xi[j];
    }
    const T correction = dot * s * s * s / static_cast<T>(d);
    T* go = gx.row(i);
    for (std::size_t j = 0; j < d; ++j) go[j] += gain(0, j) * gi[j] * s - xi[j] * correction;
  }
}

/// Precomputed rotation phases, one (cos, sin) pair per (row, feature pair).
/// Positions are the shared patch indices, so one table serves both pathways
/// and every layer of a forward/backward pass.
template <typename T>
struct RotaryPhases {
  std::size_t head_dim = 0;
  Matrix<T> cos_table;  // n x head_dim/2
  Matrix<T> sin_table;

  RotaryPhases() = default;
  RotaryPhases(const std::vector<std::size_t>& positions, std::size_t head_dim_in)
      : head_dim(head_dim_in),
        cos_table(positions.size(), head_dim_in / 2),
        sin_table(positions.size(), head_dim_in / 2) {
    const std::size_t pairs = head_dim / 2;
    std::vector<double> freq(pairs);
    for (std::size_t t = 0; t < pairs; ++t)
      freq[t] = std::pow(kRotaryBase,
                         -static_cast<double>(2 * t) / static_cast<double>(head_dim));
    for (std::size_t i = 0; i < positions.size(); ++i)
      for (std::size_t t = 0; t < pairs; ++t) {
        const double theta = static_cast<double>(positions[i]) * freq[t];
        cos_table(i, t) = static_cast<T>(std::cos(theta));
        sin_table(i, t) = static_cast<T>(std::sin(theta));
      }
  }
};

/// Rotates even/odd feature pairs of every head slice by the tabulated
/// phases. Setting invert rotates backwards (the exact gradient map).
template <typename T>
void rotary_apply(Matrix<T>& x, std::size_t n_heads, const RotaryPhases<T>& phases,
                  bool invert = false) {
  const std::size_t head_dim = x.cols() / n_heads;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    T* row = x.row(i);
    for (std::size_t h = 0; h < n_heads; ++h) {
      T* slice = row + h * head_dim;
      for (std::size_t t = 0; t + 1 < head_dim; t += 2) {
        const T c = phases.cos_table(i, t / 2);
        const T s = invert ? -phases.sin_table(i, t / 2) : phases.sin_table(i, t / 2);
        const T a = slice[t], b = slice[t + 1];
        slice[t] = a * c - b * s;
        slice[t + 1] = a * s + b * c;
      }
    }
  }
}

/// Numerically safe softmax over a contiguous span, in place.
template <typename T>
void softmax_inplace(T* values, std::size_t count) {
  T peak = values[0];
  for (std::size_t i = 1; i < count; ++i) peak = std::max(peak, values[i]);
  double total = 0.0;
  for (std::size_t i = 0; i < count; ++i) {
    const double e = std::exp(static_cast<double>(values[i] - peak));
    values[i] = static_cast<T>(e);
    total += e;
  }
  for (std::size_t i = 0; i < count; ++i) values[i] = static_cast<T>(values[i] / total);
}

}  // namespace wavemoe::nn
