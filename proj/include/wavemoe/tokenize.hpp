#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <tuple>
#include <vector>

#include "wavemoe/errors.hpp"
#include "wavemoe/matrix.hpp"
#include "wavemoe/wavelet.hpp"

namespace wavemoe::tok {

inline constexpr double kStdFloor = 1e-8;

template <typename T>
struct NormStats {
  T mean = T(0);
  T std = T(1);
};

/// Two token streams over one shared temporal index. Row j of time_patches
/// covers signal samples [j*P, (j+1)*P); row j of wavelet_patches holds the
/// coefficient groups whose periodized support covers the same interval.
template <typename T>
struct AlignedTokenSequence {
  Matrix<T> time_patches;     // n x P
  Matrix<T> wavelet_patches;  // n x P
  Matrix<T> patch_mask;       // n x P, 1 = valid value position
  std::size_t n_patches = 0;
  std::size_t patch_length = 0;
};

template <typename T>
struct TrainingTargets {
  Matrix<T> time_targets;     // (n-1) x P
  Matrix<T> wavelet_targets;  // (n-1) x P
  Matrix<T> target_mask;      // (n-1) x P
};

/// Per-window normalization over mask-valid positions (population std,
/// floored at 1e-8). Masked positions pass through as zero.
template <typename T>
std::pair<std::vector<T>, NormStats<T>> instance_normalize(const std::vector<T>& window,
                                                           const std::vector<T>& mask) {
  if (window.size() != mask.size())
    throw ContractError("instance_normalize: window/mask length mismatch");
  double sum = 0.0;
  std::size_t valid = 0;
  for (std::size_t i = 0; i < window.size(); ++i) {
    if (mask[i] != T(0)) {
      sum += static_cast<double>(window[i]);
      ++valid;
    }
  }
  if (valid == 0) throw DataError("degenerate window: all positions masked");
  const double mean = sum / static_cast<double>(valid);
  double var = 0.0;
  for (std::size_t i = 0; i < window.size(); ++i) {
    if (mask[i] != T(0)) {
      const double d = static_cast<double>(window[i]) - mean;
      var += d * d;
    }
  }
  var /= static_cast<double>(valid);
  const double std_dev = std::max(std::sqrt(var), kStdFloor);

  NormStats<T> stats{static_cast<T>(mean), static_cast<T>(std_dev)};
  std::vector<T> normalized(window.size(), T(0));
  for (std::size_t i = 0; i < window.size(); ++i)
    if (mask[i] != T(0))
      normalized[i] = static_cast<T>((static_cast<double>(window[i]) - mean) / std_dev);
  return {std::move(normalized), stats};
}

template <typename T>
std::vector<T> denormalize(const std::vector<T>& values, const NormStats<T>& stats) {
  std::vector<T> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) out[i] = values[i] * stats.std + stats.mean;
  return out;
}

/// Splits a series into contiguous rows of length P.
template <typename T>
Matrix<T> patchify_time(const std::vector<T>& series, std::size_t patch_length) {
  if (patch_length == 0 || series.size() % patch_length != 0)
    throw ContractError("patchify_time: invalid length " + std::to_string(series.size()) +
                        " for patch length " + std::to_string(patch_length));
  const std::size_t n = series.size() / patch_length;
  Matrix<T> out(n, patch_length);
  for (std::size_t j = 0; j < series.size(); ++j) out.data()[j] = series[j];
  return out;
}

/// Groups level-2 pyramid coefficients into patches aligned with the time
/// patches: row j = [ cD1[jP/2 .. jP/2+P/2) | cD2[jP/4 .. jP/4+P/4) |
/// cA2[jP/4 .. jP/4+P/4) ], giving each wavelet token dimension P.
template <typename T>
Matrix<T> patchify_wavelet(const wavelet::CoefficientPyramid<T>& pyramid,
                           std::size_t patch_length) {
  if (pyramid.levels != 2)
    throw ContractError("patchify_wavelet: alignment requires a level-2 pyramid");
  if (patch_length % 4 != 0)
    throw ContractError("patchify_wavelet: alignment requires patch length divisible by 4, got " +
                        std::to_string(patch_length));
  wavelet::validate_pyramid(pyramid);
  const std::size_t len = pyramid.original_length;
  if (len % patch_length != 0)
    throw ContractError("patchify_wavelet: original length not divisible by patch length");
  const std::size_t n = len / patch_length;
  const auto& d1 = pyramid.details[1];
  const auto& d2 = pyramid.details[0];
  const auto& a2 = pyramid.approx;

  const std::size_t half = patch_length / 2, quarter = patch_length / 4;
  Matrix<T> out(n, patch_length);
  for (std::size_t j = 0; j < n; ++j) {
    T* row = out.row(j);
    for (std::size_t i = 0; i < half; ++i) row[i] = d1[j * half + i];
    for (std::size_t i = 0; i < quarter; ++i) row[half + i] = d2[j * quarter + i];
    for (std::size_t i = 0; i < quarter; ++i) row[half + quarter + i] = a2[j * quarter + i];
  }
  return out;
}

/// Builds both token streams for an already-normalized window.
template <typename T>
AlignedTokenSequence<T> build_tokens(const std::vector<T>& normalized, const std::vector<T>& mask,
                                     const wavelet::FilterBank<T>& bank,
                                     std::size_t patch_length) {
  AlignedTokenSequence<T> tokens;
  tokens.time_patches = patchify_time(normalized, patch_length);
  tokens.patch_mask = patchify_time(mask, patch_length);
  tokens.wavelet_patches = patchify_wavelet(wavelet::dwt_multi(normalized, bank, 2), patch_length);
  tokens.n_patches = tokens.time_patches.rows();
  tokens.patch_length = patch_length;
  return tokens;
}

/// Normalize + transform + patchify in one call; the usual entry point for
/// training and rollout.
template <typename T>
std::pair<AlignedTokenSequence<T>, NormStats<T>> tokenize_window(
    const std::vector<T>& values, const std::vector<T>& mask, const wavelet::FilterBank<T>& bank,
    std::size_t patch_length) {
  auto [normalized, stats] = instance_normalize(values, mask);
  return {build_tokens(normalized, mask, bank, patch_length), stats};
}

/// Next-patch supervision: target row j is patch j+1 of each stream, with the
/// mask inherited from the target patch.
template <typename T>
TrainingTargets<T> make_training_targets(const AlignedTokenSequence<T>& tokens) {
  if (tokens.n_patches < 2)
    throw ContractError("make_training_targets: insufficient context (need >= 2 patches)");
  const std::size_t n = tokens.n_patches, p = tokens.patch_length;
  TrainingTargets<T> t;
  t.time_targets = Matrix<T>(n - 1, p);
  t.wavelet_targets = Matrix<T>(n - 1, p);
  t.target_mask = Matrix<T>(n - 1, p);
  for (std::size_t j = 0; j + 1 < n; ++j)
    for (std::size_t i = 0; i < p; ++i) {
      t.time_targets(j, i) = tokens.time_patches(j + 1, i);
      t.wavelet_targets(j, i) = tokens.wavelet_patches(j + 1, i);
      t.target_mask(j, i) = tokens.patch_mask(j + 1, i);
    }
  return t;
}

}  // namespace wavemoe::tok
