#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "wavemoe/errors.hpp"

namespace wavemoe::wavelet {

/// Analysis/synthesis filter pair for a dyadic filter-bank transform.
///
/// Filters are stored sqrt(2)-normalized (lowpass taps sum to sqrt(2)) with an
/// explicit origin: tap m of a filter acts on sample offset (m - origin)
/// relative to the output position. Keeping the origin per filter lets the
/// symmetric biorthogonal pairs sit centered, which is what makes the
/// periodized transform invert exactly.
template <typename T>
struct FilterBank {
  std::string name;
  std::vector<T> analysis_low;
  std::vector<T> analysis_high;
  std::vector<T> synthesis_low;
  std::vector<T> synthesis_high;
  int analysis_low_origin = 0;
  int analysis_high_origin = 0;
  int synthesis_low_origin = 0;
  int synthesis_high_origin = 0;
};

/// Multi-level transform output, coarsest first: approx = cA_L,
/// details = [cD_L, ..., cD_1].
template <typename T>
struct CoefficientPyramid {
  int levels = 0;
  std::vector<T> approx;
  std::vector<std::vector<T>> details;
  std::size_t original_length = 0;
};

/// Builds a supported filter bank. "bior2.2" is the production bank; "haar"
/// is kept for orthogonal-case checks.
template <typename T = double>
FilterBank<T> build_filter_bank(const std::string& name) {
  const T r2 = static_cast<T>(std::sqrt(2.0));
  FilterBank<T> bank;
  bank.name = name;
  if (name == "haar") {
    const T h = r2 / T(2);
    bank.analysis_low = {h, h};
    bank.analysis_high = {h, -h};
    bank.synthesis_low = {h, h};
    bank.synthesis_high = {h, -h};
    // all origins 0
  } else if (name == "bior2.2") {
    // CDF 5/3 biorthogonal spline pair. Highpass filters follow the
    // alternating-sign quadrature relations g~[l] = (-1)^l h[1-l],
    // g[l] = (-1)^l h~[1-l] applied to the centered lowpass supports.
    bank.analysis_low = {-r2 / 8, r2 / 4, r2 * 3 / 4, r2 / 4, -r2 / 8};
    bank.analysis_low_origin = 2;
    bank.analysis_high = {r2 / 4, -r2 / 2, r2 / 4};
    bank.analysis_high_origin = 0;
    bank.synthesis_low = {r2 / 4, r2 / 2, r2 / 4};
    bank.synthesis_low_origin = 1;
    bank.synthesis_high = {r2 / 8, r2 / 4, -r2 * 3 / 4, r2 / 4, r2 / 8};
    bank.synthesis_high_origin = 1;
  } else {
    throw ContractError("unsupported wavelet family: " + name);
  }
  return bank;
}

namespace detail {

template <typename T>
void analyze(const std::vector<T>& x, const std::vector<T>& filter, int origin,
             std::vector<T>& out) {
  const std::size_t n = x.size();
  const std::size_t half = n / 2;
  out.assign(half, T(0));
  for (std::size_t i = 0; i < half; ++i) {
    T acc = T(0);
    for (std::size_t m = 0; m < filter.size(); ++m) {
      const std::ptrdiff_t raw = static_cast<std::ptrdiff_t>(2 * i + m) - origin;
      const std::size_t idx = static_cast<std::size_t>(((raw % static_cast<std::ptrdiff_t>(n)) +
                                                        static_cast<std::ptrdiff_t>(n)) %
                                                       static_cast<std::ptrdiff_t>(n));
      acc += filter[m] * x[idx];
    }
    out[i] = acc;
  }
}

template <typename T>
void synthesize_into(const std::vector<T>& coeffs, const std::vector<T>& filter, int origin,
                     std::vector<T>& x) {
  const std::size_t n = x.size();
  for (std::size_t i = 0; i < coeffs.size(); ++i) {
    for (std::size_t m = 0; m < filter.size(); ++m) {
      const std::ptrdiff_t raw = static_cast<std::ptrdiff_t>(2 * i + m) - origin;
      const std::size_t idx = static_cast<std::size_t>(((raw % static_cast<std::ptrdiff_t>(n)) +
                                                        static_cast<std::ptrdiff_t>(n)) %
                                                       static_cast<std::ptrdiff_t>(n));
      x[idx] += coeffs[i] * filter[m];
    }
  }
}

}  // namespace detail

/// One analysis step with periodized boundaries: circular convolution with the
/// analysis pair followed by dyadic downsampling. Both outputs have length
/// len(signal)/2.
template <typename T>
std::pair<std::vector<T>, std::vector<T>> dwt_step(const std::vector<T>& signal,
                                                   const FilterBank<T>& bank) {
  if (signal.size() < 2 || signal.size() % 2 != 0)
    throw ContractError("dwt_step: invalid length " + std::to_string(signal.size()) +
                        " (need even, >= 2)");
  std::vector<T> approx, detail_out;
  detail::analyze(signal, bank.analysis_low, bank.analysis_low_origin, approx);
  detail::analyze(signal, bank.analysis_high, bank.analysis_high_origin, detail_out);
  return {std::move(approx), std::move(detail_out)};
}

/// Inverse of dwt_step.
template <typename T>
std::vector<T> idwt_step(const std::vector<T>& approx, const std::vector<T>& detail_in,
                         const FilterBank<T>& bank) {
  if (approx.size() != detail_in.size() || approx.empty())
    throw ContractError("idwt_step: approx/detail length mismatch");
  std::vector<T> x(2 * approx.size(), T(0));
  detail::synthesize_into(approx, bank.synthesis_low, bank.synthesis_low_origin, x);
  detail::synthesize_into(detail_in, bank.synthesis_high, bank.synthesis_high_origin, x);
  return x;
}

/// Cascaded multi-level analysis. len(signal) must be divisible by 2^levels.
template <typename T>
CoefficientPyramid<T> dwt_multi(const std::vector<T>& signal, const FilterBank<T>& bank,
                                int levels) {
  if (levels < 1) throw ContractError("dwt_multi: levels must be >= 1");
  const std::size_t n = signal.size();
  const std::size_t div = std::size_t(1) << levels;
  if (n == 0 || n % div != 0)
    throw ContractError("dwt_multi: invalid length " + std::to_string(n) +
                        " (must be divisible by " + std::to_string(div) + ")");
  CoefficientPyramid<T> pyr;
  pyr.levels = levels;
  pyr.original_length = n;
  pyr.details.resize(levels);
  std::vector<T> current = signal;
  for (int level = 0; level < levels; ++level) {
    auto [approx, det] = dwt_step(current, bank);
    pyr.details[levels - 1 - level] = std::move(det);  // coarsest first
    current = std::move(approx);
  }
  pyr.approx = std::move(current);
  return pyr;
}

template <typename T>
void validate_pyramid(const CoefficientPyramid<T>& pyr) {
  if (pyr.levels < 1 || pyr.details.size() != static_cast<std::size_t>(pyr.levels))
    throw ContractError("malformed pyramid: level count");
  const std::size_t div = std::size_t(1) << pyr.levels;
  if (pyr.original_length == 0 || pyr.original_length % div != 0)
    throw ContractError("malformed pyramid: original_length");
  // details run coarsest (index 0 = cD_L) to finest (cD_1);
  // lengths ladder down: cD_1 = L/2, cD_2 = L/4, ..., cD_L = cA_L = L/2^L
  std::size_t len = pyr.original_length;
  for (int level = 1; level <= pyr.levels; ++level) {
    len /= 2;
    const auto& d = pyr.details[static_cast<std::size_t>(pyr.levels - level)];
    if (d.size() != len)
      throw ContractError("malformed pyramid: cD_" + std::to_string(level) + " length " +
                          std::to_string(d.size()) + ", expected " + std::to_string(len));
  }
  if (pyr.approx.size() != len)
    throw ContractError("malformed pyramid: cA length " + std::to_string(pyr.approx.size()) +
                        ", expected " + std::to_string(len));
}

/// Exact inverse of dwt_multi; returns a vector of pyramid.original_length.
template <typename T>
std::vector<T> idwt_multi(const CoefficientPyramid<T>& pyr, const FilterBank<T>& bank) {
  validate_pyramid(pyr);
  std::vector<T> current = pyr.approx;
  for (int level = pyr.levels; level >= 1; --level) {
    const auto& det = pyr.details[static_cast<std::size_t>(pyr.levels - level)];
    current = idwt_step(current, det, bank);
  }
  return current;
}

}  // namespace wavemoe::wavelet
