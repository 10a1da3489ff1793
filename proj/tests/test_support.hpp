#pragma once

// Test-only oracles and helpers. Everything here is deliberately written as a
// second, independent route to the quantities the library computes: matrix
// transforms instead of convolutions, dense attention instead of sparse,
// Gaussian elimination instead of synthesis filters.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <random>
#include <vector>

#include "wavemoe/wavelet.hpp"

namespace testsup {

using std::size_t;
using std::vector;

inline vector<double> random_vector(std::mt19937_64& gen, size_t n, double lo = -1.0,
                                    double hi = 1.0) {
  vector<double> v(n);
  for (auto& x : v) x = lo + (hi - lo) * (static_cast<double>(gen() >> 11) * 0x1.0p-53);
  return v;
}

/// Full analysis matrix of one periodized filter-bank step: rows 0..n/2-1 are
/// the lowpass rows, n/2..n-1 the highpass rows.
inline vector<vector<double>> analysis_matrix(const wavemoe::wavelet::FilterBank<double>& bank,
                                              size_t n) {
  vector<vector<double>> m(n, vector<double>(n, 0.0));
  auto fill = [&](const vector<double>& f, int origin, size_t row0) {
    for (size_t i = 0; i < n / 2; ++i)
      for (size_t t = 0; t < f.size(); ++t) {
        const auto raw = static_cast<std::ptrdiff_t>(2 * i + t) - origin;
        const auto idx = static_cast<size_t>(((raw % static_cast<std::ptrdiff_t>(n)) +
                                              static_cast<std::ptrdiff_t>(n)) %
                                             static_cast<std::ptrdiff_t>(n));
        m[row0 + i][idx] += f[t];
      }
  };
  fill(bank.analysis_low, bank.analysis_low_origin, 0);
  fill(bank.analysis_high, bank.analysis_high_origin, n / 2);
  return m;
}

inline vector<double> matvec(const vector<vector<double>>& m, const vector<double>& x) {
  vector<double> y(m.size(), 0.0);
  for (size_t i = 0; i < m.size(); ++i)
    for (size_t j = 0; j < x.size(); ++j) y[i] += m[i][j] * x[j];
  return y;
}

/// Solve m * x = b by Gaussian elimination with partial pivoting.
inline vector<double> solve(vector<vector<double>> m, vector<double> b) {
  const size_t n = b.size();
  for (size_t col = 0; col < n; ++col) {
    size_t piv = col;
    for (size_t r = col + 1; r < n; ++r)
      if (std::abs(m[r][col]) > std::abs(m[piv][col])) piv = r;
    std::swap(m[col], m[piv]);
    std::swap(b[col], b[piv]);
    for (size_t r = col + 1; r < n; ++r) {
      const double f = m[r][col] / m[col][col];
      if (f == 0.0) continue;
      for (size_t c = col; c < n; ++c) m[r][c] -= f * m[col][c];
      b[r] -= f * b[col];
    }
  }
  vector<double> x(n, 0.0);
  for (size_t i = n; i-- > 0;) {
    double acc = b[i];
    for (size_t j = i + 1; j < n; ++j) acc -= m[i][j] * x[j];
    x[i] = acc / m[i][i];
  }
  return x;
}

/// One-step DWT via the explicit matrix route.
inline std::pair<vector<double>, vector<double>> oracle_dwt_step(
    const wavemoe::wavelet::FilterBank<double>& bank, const vector<double>& x) {
  const auto m = analysis_matrix(bank, x.size());
  const auto y = matvec(m, x);
  vector<double> approx(y.begin(), y.begin() + static_cast<std::ptrdiff_t>(x.size() / 2));
  vector<double> detail(y.begin() + static_cast<std::ptrdiff_t>(x.size() / 2), y.end());
  return {approx, detail};
}

/// Multi-level DWT via repeated matrix application; details coarsest first.
inline wavemoe::wavelet::CoefficientPyramid<double> oracle_dwt_multi(
    const wavemoe::wavelet::FilterBank<double>& bank, const vector<double>& x, int levels) {
  wavemoe::wavelet::CoefficientPyramid<double> pyr;
  pyr.levels = levels;
  pyr.original_length = x.size();
  pyr.details.resize(static_cast<size_t>(levels));
  vector<double> cur = x;
  for (int l = 0; l < levels; ++l) {
    auto [a, d] = oracle_dwt_step(bank, cur);
    pyr.details[static_cast<size_t>(levels - 1 - l)] = d;
    cur = a;
  }
  pyr.approx = cur;
  return pyr;
}

inline double max_abs_diff(const vector<double>& a, const vector<double>& b) {
  double worst = 0.0;
  for (size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

inline double sum_sq(const vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return s;
}

}  // namespace testsup

#include "wavemoe/model.hpp"

namespace testsup {

// Independent dense causal attention with its own rotary implementation.
// mask_bottom: additionally drop the lowest-scoring allowed key per (head,row)
// when more than `keep` keys are allowed.
inline wavemoe::Matrix<double> dense_attention_oracle(const wavemoe::Matrix<double>& hidden,
                                      const wavemoe::model::AttentionWeights<double>& p, int n_heads,
                                      int keep_limit = -1) {
  const size_t n = hidden.rows(), d = hidden.cols();
  const size_t heads = static_cast<size_t>(n_heads), hd = d / heads;
  auto apply_linear = [](const wavemoe::nn::Linear<double>& lin, const wavemoe::Matrix<double>& x) {
    wavemoe::Matrix<double> y(x.rows(), lin.out_dim());
    for (size_t i = 0; i < x.rows(); ++i)
      for (size_t j = 0; j < lin.out_dim(); ++j) {
        double acc = lin.b(0, j);
        for (size_t k = 0; k < lin.in_dim(); ++k) acc += x(i, k) * lin.w(k, j);
        y(i, j) = acc;
      }
    return y;
  };
  wavemoe::Matrix<double> q = apply_linear(p.q, hidden);
  wavemoe::Matrix<double> k = apply_linear(p.k, hidden);
  wavemoe::Matrix<double> v = apply_linear(p.v, hidden);
  for (size_t i = 0; i < n; ++i)
    for (size_t h = 0; h < heads; ++h)
      for (size_t t = 0; t + 1 < hd; t += 2) {
        const double theta =
            static_cast<double>(i) * std::pow(10000.0, -static_cast<double>(t) / static_cast<double>(hd));
        const double c = std::cos(theta), s = std::sin(theta);
        for (wavemoe::Matrix<double>* m : {&q, &k}) {
          double& a = (*m)(i, h * hd + t);
          double& b = (*m)(i, h * hd + t + 1);
          const double a0 = a, b0 = b;
          a = a0 * c - b0 * s;
          b = a0 * s + b0 * c;
        }
      }
  wavemoe::Matrix<double> ctx(n, d, 0.0);
  for (size_t h = 0; h < heads; ++h)
    for (size_t j = 0; j < n; ++j) {
      vector<double> scores(j + 1);
      for (size_t i = 0; i <= j; ++i) {
        double s = 0.0;
        for (size_t t = 0; t < hd; ++t) s += q(j, h * hd + t) * k(i, h * hd + t);
        scores[i] = s / std::sqrt(static_cast<double>(hd));
      }
      vector<bool> allowed(j + 1, true);
      if (keep_limit > 0) {
        while (static_cast<int>(std::count(allowed.begin(), allowed.end(), true)) > keep_limit) {
          size_t worst = 0;
          double worst_score = std::numeric_limits<double>::infinity();
          for (size_t i = 0; i <= j; ++i)
            if (allowed[i] && scores[i] < worst_score) {
              worst_score = scores[i];
              worst = i;
            }
          allowed[worst] = false;
        }
      }
      double peak = -std::numeric_limits<double>::infinity();
      for (size_t i = 0; i <= j; ++i)
        if (allowed[i]) peak = std::max(peak, scores[i]);
      double total = 0.0;
      vector<double> w(j + 1, 0.0);
      for (size_t i = 0; i <= j; ++i)
        if (allowed[i]) {
          w[i] = std::exp(scores[i] - peak);
          total += w[i];
        }
      for (size_t i = 0; i <= j; ++i)
        if (allowed[i])
          for (size_t t = 0; t < hd; ++t) ctx(j, h * hd + t) += (w[i] / total) * v(i, h * hd + t);
    }
  return apply_linear(p.o, ctx);
}


}  // namespace testsup
