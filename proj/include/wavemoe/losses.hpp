#pragma once

#include <cmath>
#include <cstddef>

#include "wavemoe/matrix.hpp"
#include "wavemoe/network.hpp"
#include "wavemoe/tokenize.hpp"

namespace wavemoe::train {

/// Everything the joint objective needs beyond the forward trace.
struct LossSpec {
  double huber_delta = 1.0;
  double wavelet_weight = 1.0;   // lambda_w
  double balance_coeff = 0.01;
};

struct LossComponents {
  double total = 0.0;
  double time = 0.0;
  double wavelet = 0.0;
  double balance = 0.0;
};

/// Masked mean Huber loss: 0.5 r^2 inside delta, delta(|r| - delta/2) outside,
/// averaged over mask-valid entries (0 when no entry is valid).
template <typename T>
double huber(const Matrix<T>& pred, const Matrix<T>& target, double delta,
             const Matrix<T>& mask) {
  if (!pred.same_shape(target) || !pred.same_shape(mask))
    throw ContractError("huber: shape mismatch");
  if (delta <= 0) throw ContractError("huber: delta must be positive");
  double sum = 0.0;
  std::size_t valid = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (mask.data()[i] == T(0)) continue;
    const double r = static_cast<double>(pred.data()[i]) - static_cast<double>(target.data()[i]);
    const double a = std::abs(r);
    sum += (a <= delta) ? 0.5 * r * r : delta * (a - 0.5 * delta);
    ++valid;
  }
  return valid == 0 ? 0.0 : sum / static_cast<double>(valid);
}

/// d(huber)/d(pred) scaled by `weight`, with the same masked-mean convention.
template <typename T>
Matrix<T> huber_backward(const Matrix<T>& pred, const Matrix<T>& target, double delta,
                         const Matrix<T>& mask, double weight) {
  Matrix<T> grad(pred.rows(), pred.cols(), T(0));
  std::size_t valid = 0;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask.data()[i] != T(0)) ++valid;
  if (valid == 0) return grad;
  const double scale = weight / static_cast<double>(valid);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (mask.data()[i] == T(0)) continue;
    const double r = static_cast<double>(pred.data()[i]) - static_cast<double>(target.data()[i]);
    const double g = (std::abs(r) <= delta) ? r : delta * (r > 0 ? 1.0 : -1.0);
    grad.data()[i] = static_cast<T>(g * scale);
  }
  return grad;
}

/// total = huber(time) + lambda_w * huber(wavelet) + balance_coeff * balance.
template <typename T>
LossComponents joint_loss(const model::ForwardTrace<T>& trace, const tok::TrainingTargets<T>& targets,
                          const LossSpec& spec) {
  LossComponents parts;
  parts.time = huber(trace.time_predictions, targets.time_targets, spec.huber_delta,
                     targets.target_mask);
  parts.wavelet = huber(trace.wavelet_predictions, targets.wavelet_targets, spec.huber_delta,
                        targets.target_mask);
  parts.balance = static_cast<double>(trace.load_balance_loss);
  parts.total = parts.time + spec.wavelet_weight * parts.wavelet + spec.balance_coeff * parts.balance;
  if (!std::isfinite(parts.total))
    throw NumericError("joint loss is not finite (time=" + std::to_string(parts.time) +
                       ", wavelet=" + std::to_string(parts.wavelet) +
                       ", balance=" + std::to_string(parts.balance) + ")");
  return parts;
}

}  // namespace wavemoe::train
