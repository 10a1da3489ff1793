#pragma once

#include <cstddef>
#include <utility>
#include <vector>

#include "wavemoe/losses.hpp"
#include "wavemoe/network.hpp"

namespace wavemoe::model {

template <typename T>
using GradientSet = ModelWeights<T>;

namespace detail {

/// Backward of the attention core. gy is the grad at the sublayer output
/// (post output map). Accumulates into the parameter grads and into gx (grad
/// at the normed input).
template <typename T>
void attention_backward(const AttentionWeights<T>& params, const AttentionCache<T>& ac,
                        const ModelConfig& cfg, const nn::RotaryPhases<T>& phases,
                        const Matrix<T>& gy, AttentionWeights<T>& grad, Matrix<T>& gx) {
  const std::size_t n = ac.x_norm.rows();
  const std::size_t d = ac.x_norm.cols();
  const std::size_t heads = static_cast<std::size_t>(cfg.n_heads);
  const std::size_t head_dim = d / heads;
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(head_dim)));

  // output map
  Matrix<T> g_context(n, d, T(0));
  nn::linear_backward(params.o, ac.context, gy, grad.o, g_context);

  Matrix<T> gq(n, d, T(0)), gk(n, d, T(0)), gv(n, d, T(0));
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * head_dim;
    for (std::size_t j = 0; j < n; ++j) {
      const auto& picks = ac.selected[h * n + j];
      const T* gc = g_context.row(j) + off;
      const T* qj = ac.q.row(j) + off;

      // dL/dw_i and the softmax pullback
      T dot = T(0);
      std::vector<T> gw(picks.size());
      for (std::size_t t = 0; t < picks.size(); ++t) {
        const T* vi = ac.v.row(picks[t].first) + off;
        T acc = T(0);
        for (std::size_t c = 0; c < head_dim; ++c) acc += gc[c] * vi[c];
        gw[t] = acc;
        dot += picks[t].second * acc;
      }
      for (std::size_t t = 0; t < picks.size(); ++t) {
        const std::size_t i = picks[t].first;
        const T w = picks[t].second;
        const T gs = w * (gw[t] - dot);  // grad at the raw (scaled) score
        const T* ki = ac.k.row(i) + off;
        T* gqj = gq.row(j) + off;
        T* gki = gk.row(i) + off;
        T* gvi = gv.row(i) + off;
        for (std::size_t c = 0; c < head_dim; ++c) {
          gqj[c] += scale * gs * ki[c];
          gki[c] += scale * gs * qj[c];
          gvi[c] += w * gc[c];
        }
      }
    }
  }

  // undo the rotary phases, then the q/k/v projections
  nn::rotary_apply(gq, heads, phases, /*invert=*/true);
  nn::rotary_apply(gk, heads, phases, /*invert=*/true);
  nn::linear_backward(params.q, ac.x_norm, gq, grad.q, gx);
  nn::linear_backward(params.k, ac.x_norm, gk, grad.k, gx);
  nn::linear_backward(params.v, ac.x_norm, gv, grad.v, gx);
}

/// Backward of one gated feed-forward branch over the gathered rows.
template <typename T>
void branch_backward(const BranchWeights<T>& br, const BranchCache<T>& bc, const Matrix<T>& gy,
                     BranchWeights<T>& grad, Matrix<T>& gx) {
  Matrix<T> g_mix(bc.mix.rows(), bc.mix.cols(), T(0));
  nn::linear_backward(br.down, bc.mix, gy, grad.down, g_mix);

  Matrix<T> g_gate_pre(bc.gate_pre.rows(), bc.gate_pre.cols());
  Matrix<T> g_up(bc.up.rows(), bc.up.cols());
  for (std::size_t i = 0; i < g_mix.size(); ++i) {
    const T gp = bc.gate_pre.data()[i];
    g_gate_pre.data()[i] = g_mix.data()[i] * bc.up.data()[i] * nn::gelu_grad(gp);
    g_up.data()[i] = g_mix.data()[i] * nn::gelu(gp);
  }
  nn::linear_backward(br.gate, bc.x, g_gate_pre, grad.gate, gx);
  nn::linear_backward(br.up, bc.x, g_up, grad.up, gx);
}

/// Backward of the MoE sublayer. g_t/g_w arrive as grads at the sublayer
/// output and leave as grads at the sublayer input (residual included).
template <typename T>
void moe_backward(const LayerWeights<T>& layer, const MoECache<T>& mc, const ModelConfig& cfg,
                  const Matrix<T>& x_t_in, const Matrix<T>& x_w_in, double balance_weight,
                  LayerWeights<T>& grad, Matrix<T>& g_t, Matrix<T>& g_w) {
  const std::size_t n = x_t_in.rows();
  const std::size_t d = static_cast<std::size_t>(cfg.hidden_size);
  const int n_experts = cfg.n_experts;

  Matrix<T> g_t_norm(n, d, T(0)), g_w_norm(n, d, T(0));
  Matrix<T> g_logits(n, static_cast<std::size_t>(n_experts), T(0));

  // routed experts: grads through outputs and through the gates
  std::vector<std::vector<T>> g_gate(n);
  for (std::size_t i = 0; i < n; ++i) g_gate[i].assign(mc.gates[i].size(), T(0));

  for (std::size_t e = 0; e < mc.experts.size(); ++e) {
    const auto& ec = mc.experts[e];
    if (ec.positions.empty()) continue;
    const std::size_t rows = ec.positions.size();

    Matrix<T> gy_t(rows, d), gy_w(rows, d);
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t pos = ec.positions[r];
      T gate = T(0);
      std::size_t slot = 0;
      for (std::size_t s = 0; s < mc.expert_ids[pos].size(); ++s)
        if (mc.expert_ids[pos][s] == static_cast<int>(e)) {
          gate = mc.gates[pos][s];
          slot = s;
        }
      const T* gt = g_t.row(pos);
      const T* gw = g_w.row(pos);
      const T* yt = ec.time.out.row(r);
      const T* yw = ec.wavelet.out.row(r);
      T gate_grad = T(0);
      for (std::size_t c = 0; c < d; ++c) {
        gy_t(r, c) = gate * gt[c];
        gy_w(r, c) = gate * gw[c];
        gate_grad += gt[c] * yt[c] + gw[c] * yw[c];
      }
      g_gate[pos][slot] += gate_grad;
    }

    Matrix<T> gx_t(rows, d, T(0)), gx_w(rows, d, T(0));
    branch_backward(layer.experts[e].time_branch, ec.time, gy_t, grad.experts[e].time_branch,
                    gx_t);
    branch_backward(layer.experts[e].wavelet_branch, ec.wavelet, gy_w,
                    grad.experts[e].wavelet_branch, gx_w);
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t pos = ec.positions[r];
      for (std::size_t c = 0; c < d; ++c) {
        g_t_norm(pos, c) += gx_t(r, c);
        g_w_norm(pos, c) += gx_w(r, c);
      }
    }
  }

  // renormalized gates are a softmax over the selected logits
  for (std::size_t i = 0; i < n; ++i) {
    const auto& gates = mc.gates[i];
    T dot = T(0);
    for (std::size_t s = 0; s < gates.size(); ++s) dot += gates[s] * g_gate[i][s];
    for (std::size_t s = 0; s < gates.size(); ++s) {
      const T gl = gates[s] * (g_gate[i][s] - dot);
      g_logits(i, static_cast<std::size_t>(mc.expert_ids[i][s])) += gl;
    }
  }

  // balance term: d/dlogits of E * sum_e f_e * mean_i probs[i][e], with the
  // routing fractions f_e treated as constants of the forward pass
  if (balance_weight != 0.0) {
    const double outer =
        balance_weight * static_cast<double>(n_experts) / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      double dot = 0.0;
      for (std::size_t e = 0; e < mc.freq.size(); ++e)
        dot += static_cast<double>(mc.freq[e]) * static_cast<double>(mc.probs(i, e));
      for (std::size_t e = 0; e < mc.freq.size(); ++e) {
        const double gp = outer * (static_cast<double>(mc.freq[e]) - dot);
        g_logits(i, e) += static_cast<T>(gp * static_cast<double>(mc.probs(i, e)));
      }
    }
  }

  // shared expert (unit gate)
  if (cfg.use_shared_expert) {
    branch_backward(layer.shared_expert.time_branch, mc.shared.time, g_t,
                    grad.shared_expert.time_branch, g_t_norm);
    branch_backward(layer.shared_expert.wavelet_branch, mc.shared.wavelet, g_w,
                    grad.shared_expert.wavelet_branch, g_w_norm);
  }

  // router MLP
  Matrix<T> g_hidden(n, mc.hidden.cols(), T(0));
  nn::linear_backward(layer.router_out, mc.hidden, g_logits, grad.router_out, g_hidden);
  for (std::size_t i = 0; i < g_hidden.size(); ++i)
    g_hidden.data()[i] *= nn::gelu_grad(mc.hidden_pre.data()[i]);
  Matrix<T> g_router_in(n, 2 * d, T(0));
  nn::linear_backward(layer.router_hidden, mc.router_in, g_hidden, grad.router_hidden,
                      g_router_in);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < d; ++c) {
      g_t_norm(i, c) += g_router_in(i, c);
      g_w_norm(i, c) += g_router_in(i, d + c);
    }

  // pre-MoE norms; residual passes the output grad straight through
  nn::rmsnorm_backward(x_t_in, layer.moe_norm_time, mc.t_inv_rms, g_t_norm, grad.moe_norm_time,
                       g_t);
  nn::rmsnorm_backward(x_w_in, layer.moe_norm_wavelet, mc.w_inv_rms, g_w_norm,
                       grad.moe_norm_wavelet, g_w);
}

}  // namespace detail

template <typename T>
struct GradientResult {
  GradientSet<T> grads;
  train::LossComponents loss;
  ForwardTrace<T> trace;
};

/// Exact reverse-mode gradients of the joint loss for every parameter.
/// Top-k selections (attention and routing) are constants of the forward
/// pass; everything on the selected branches is differentiated exactly.
template <typename T>
GradientResult<T> gradients(const tok::AlignedTokenSequence<T>& tokens,
                            const tok::TrainingTargets<T>& targets,
                            const ModelWeights<T>& weights, const train::LossSpec& spec) {
  const ModelConfig& cfg = weights.config;
  if (tokens.n_patches < 2) throw ContractError("gradients: need at least two patches");

  ForwardCache<T> cache;
  GradientResult<T> result{zeros_like(weights), {}, forward(tokens, weights, &cache)};
  const ForwardTrace<T>& trace = result.trace;
  result.loss = train::joint_loss(trace, targets, spec);  // throws NumericError if non-finite

  const std::size_t n = tokens.n_patches;
  const std::size_t d = static_cast<std::size_t>(cfg.hidden_size);
  const std::size_t p = tokens.patch_length;
  GradientSet<T>& grads = result.grads;

  // loss -> head outputs (row n-1 never feeds the loss)
  const Matrix<T> g_pred_t_rows = train::huber_backward(
      trace.time_predictions, targets.time_targets, spec.huber_delta, targets.target_mask, 1.0);
  const Matrix<T> g_pred_w_rows =
      train::huber_backward(trace.wavelet_predictions, targets.wavelet_targets, spec.huber_delta,
                            targets.target_mask, spec.wavelet_weight);
  Matrix<T> g_pred_t(n, p, T(0)), g_pred_w(n, p, T(0));
  for (std::size_t j = 0; j + 1 < n; ++j)
    for (std::size_t c = 0; c < p; ++c) {
      g_pred_t(j, c) = g_pred_t_rows(j, c);
      g_pred_w(j, c) = g_pred_w_rows(j, c);
    }

  // heads and final norms
  Matrix<T> g_norm_t(n, d, T(0)), g_norm_w(n, d, T(0));
  nn::linear_backward(weights.time_head, cache.final_t_norm, g_pred_t, grads.time_head, g_norm_t);
  nn::linear_backward(weights.wavelet_head, cache.final_w_norm, g_pred_w, grads.wavelet_head,
                      g_norm_w);
  Matrix<T> g_t(n, d, T(0)), g_w(n, d, T(0));
  nn::rmsnorm_backward(cache.final_t_in, weights.final_norm_time, cache.final_t_inv_rms, g_norm_t,
                       grads.final_norm_time, g_t);
  nn::rmsnorm_backward(cache.final_w_in, weights.final_norm_wavelet, cache.final_w_inv_rms,
                       g_norm_w, grads.final_norm_wavelet, g_w);

  const nn::RotaryPhases<T> phases(cache.positions, static_cast<std::size_t>(cfg.head_dim()));
  const double balance_weight =
      spec.balance_coeff / static_cast<double>(cfg.n_layers);  // trace averages over layers

  for (std::size_t l = weights.layers.size(); l-- > 0;) {
    const auto& layer = weights.layers[l];
    const auto& lc = cache.layers[l];

    detail::moe_backward(layer, lc.moe, cfg, lc.x_t_mid, lc.x_w_mid, balance_weight,
                         grads.layers[l], g_t, g_w);

    // attention sublayers (backward of: x += attn(norm(x)))
    Matrix<T> g_attn_in_t(n, d, T(0)), g_attn_in_w(n, d, T(0));
    detail::attention_backward(layer.time_attn, lc.t_attn, cfg, phases, g_t,
                               grads.layers[l].time_attn, g_attn_in_t);
    detail::attention_backward(layer.wavelet_attn, lc.w_attn, cfg, phases, g_w,
                               grads.layers[l].wavelet_attn, g_attn_in_w);
    nn::rmsnorm_backward(lc.x_t_in, layer.time_attn.norm_gain, lc.t_attn.inv_rms, g_attn_in_t,
                         grads.layers[l].time_attn.norm_gain, g_t);
    nn::rmsnorm_backward(lc.x_w_in, layer.wavelet_attn.norm_gain, lc.w_attn.inv_rms, g_attn_in_w,
                         grads.layers[l].wavelet_attn.norm_gain, g_w);
  }

  // embeddings
  Matrix<T> g_tokens_unused(n, p, T(0));
  nn::linear_backward(weights.time_embed, tokens.time_patches, g_t, grads.time_embed,
                      g_tokens_unused);
  g_tokens_unused.fill(T(0));
  nn::linear_backward(weights.wavelet_embed, tokens.wavelet_patches, g_w, grads.wavelet_embed,
                      g_tokens_unused);
  return result;
}

}  // namespace wavemoe::model
