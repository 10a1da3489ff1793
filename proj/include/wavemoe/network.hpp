#pragma once

#include <algorithm>
#include <cstddef>
#include <utility>
#include <vector>

#include "wavemoe/model.hpp"
#include "wavemoe/tokenize.hpp"

namespace wavemoe::model {

// ---------------------------------------------------------------------------
// Forward caches. Everything the exact backward pass needs is stashed here;
// inference passes run with cache == nullptr and skip the bookkeeping.
// ---------------------------------------------------------------------------

template <typename T>
struct AttentionCache {
  Matrix<T> x_norm;
  std::vector<T> inv_rms;
  Matrix<T> q, k, v;   // q and k hold post-rotary values
  Matrix<T> context;   // weighted value sums, concatenated heads, pre-output map
  // per (head, query): selected keys and softmax weights, key-ascending
  std::vector<std::vector<std::pair<std::size_t, T>>> selected;
};

template <typename T>
struct BranchCache {
  Matrix<T> x;         // gathered inputs
  Matrix<T> gate_pre;  // x * Wg + bg
  Matrix<T> up;        // x * Wu + bu
  Matrix<T> mix;       // gelu(gate_pre) .* up
  Matrix<T> out;       // mix * Wd + bd
};

template <typename T>
struct ExpertCache {
  std::vector<std::size_t> positions;  // token pairs routed here, ascending
  BranchCache<T> time, wavelet;
};

template <typename T>
struct MoECache {
  Matrix<T> t_norm, w_norm;
  std::vector<T> t_inv_rms, w_inv_rms;
  Matrix<T> router_in;   // n x 2d
  Matrix<T> hidden_pre;  // n x d
  Matrix<T> hidden;      // n x d
  Matrix<T> logits;      // n x E
  Matrix<T> probs;       // n x E, full softmax (balance term)
  std::vector<std::vector<int>> expert_ids;  // [pos] -> top-k, score-descending
  std::vector<std::vector<T>> gates;         // [pos] -> matching renormalized gates
  std::vector<ExpertCache<T>> experts;
  ExpertCache<T> shared;
  std::vector<T> freq;  // f_e: fraction of pairs whose top-k includes e
  T balance = T(0);
};

template <typename T>
struct LayerCache {
  Matrix<T> x_t_in, x_w_in;    // sublayer inputs (pre attention norm)
  AttentionCache<T> t_attn, w_attn;
  Matrix<T> x_t_mid, x_w_mid;  // post attention residual, pre MoE
  MoECache<T> moe;
};

template <typename T>
struct ForwardCache {
  std::vector<std::size_t> positions;
  std::vector<LayerCache<T>> layers;
  Matrix<T> final_t_in, final_w_in;
  Matrix<T> final_t_norm, final_w_norm;
  std::vector<T> final_t_inv_rms, final_w_inv_rms;
};

template <typename T>
struct RoutingRecord {
  std::vector<int> expert_ids;
  std::vector<T> gates;
};

template <typename T>
struct ForwardTrace {
  Matrix<T> time_predictions;     // (n-1) x P, aligned with shift-by-one targets
  Matrix<T> wavelet_predictions;  // (n-1) x P
  std::vector<T> time_next;       // head output at the last position: the
  std::vector<T> wavelet_next;    // next-patch forecast beyond the context
  std::vector<std::vector<RoutingRecord<T>>> router_assignments;  // [layer][pos]
  T load_balance_loss = T(0);     // mean over layers
};

// ---------------------------------------------------------------------------
// Sparse causal attention
// ---------------------------------------------------------------------------

/// Scaled-dot-product causal attention where each query keeps only its k
/// highest-scoring allowed keys (ties to the lower key index) and
/// renormalizes over them. Rotary phases are applied to queries and keys
/// using the supplied shared positions.
template <typename T>
Matrix<T> sparse_causal_attention(const Matrix<T>& hidden, const AttentionWeights<T>& params,
                                  int n_heads, int top_k, const nn::RotaryPhases<T>& phases,
                                  AttentionCache<T>* cache = nullptr) {
  const std::size_t n = hidden.rows(), d = hidden.cols();
  if (d != params.q.in_dim()) throw ContractError("attention: hidden width mismatch");
  if (phases.cos_table.rows() != n) throw ContractError("attention: phase table size mismatch");
  const std::size_t heads = static_cast<std::size_t>(n_heads);
  const std::size_t head_dim = d / heads;
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(head_dim)));

  Matrix<T> q = nn::linear_forward(params.q, hidden);
  Matrix<T> k = nn::linear_forward(params.k, hidden);
  Matrix<T> v = nn::linear_forward(params.v, hidden);
  nn::rotary_apply(q, heads, phases);
  nn::rotary_apply(k, heads, phases);

  Matrix<T> context(n, d, T(0));
  std::vector<std::vector<std::pair<std::size_t, T>>> selected;
  if (cache) selected.resize(heads * n);

  std::vector<std::pair<T, std::size_t>> scored;
  std::vector<std::pair<std::size_t, T>> picks;
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * head_dim;
    for (std::size_t j = 0; j < n; ++j) {
      const T* qj = q.row(j) + off;
      scored.clear();
      for (std::size_t i = 0; i <= j; ++i) {
        const T* ki = k.row(i) + off;
        T s = T(0);
        for (std::size_t t = 0; t < head_dim; ++t) s += qj[t] * ki[t];
        scored.emplace_back(s * scale, i);
      }
      const std::size_t keep = std::min<std::size_t>(static_cast<std::size_t>(top_k), scored.size());
      auto better = [](const std::pair<T, std::size_t>& a, const std::pair<T, std::size_t>& b) {
        return a.first > b.first || (a.first == b.first && a.second < b.second);
      };
      std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(keep),
                        scored.end(), better);

      picks.assign(keep, {});
      for (std::size_t t = 0; t < keep; ++t) picks[t] = {scored[t].second, scored[t].first};
      std::sort(picks.begin(), picks.end(),
                [](const auto& a, const auto& b) { return a.first < b.first; });

      // softmax over the kept scores
      T peak = picks[0].second;
      for (const auto& pr : picks) peak = std::max(peak, pr.second);
      double total = 0.0;
      for (auto& pr : picks) {
        const double e = std::exp(static_cast<double>(pr.second - peak));
        pr.second = static_cast<T>(e);
        total += e;
      }
      T* ctx = context.row(j) + off;
      for (auto& pr : picks) {
        pr.second = static_cast<T>(pr.second / total);
        const T* vi = v.row(pr.first) + off;
        for (std::size_t t = 0; t < head_dim; ++t) ctx[t] += pr.second * vi[t];
      }
      if (cache) selected[h * n + j] = picks;
    }
  }

  Matrix<T> out = nn::linear_forward(params.o, context);
  if (cache) {
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->context = std::move(context);
    cache->selected = std::move(selected);
  }
  return out;
}

template <typename T>
Matrix<T> sparse_causal_attention(const Matrix<T>& hidden, const AttentionWeights<T>& params,
                                  int n_heads, int top_k,
                                  const std::vector<std::size_t>& positions,
                                  AttentionCache<T>* cache = nullptr) {
  const nn::RotaryPhases<T> phases(positions, hidden.cols() / static_cast<std::size_t>(n_heads));
  return sparse_causal_attention(hidden, params, n_heads, top_k, phases, cache);
}

template <typename T>
Matrix<T> sparse_causal_attention(const Matrix<T>& hidden, const AttentionWeights<T>& params,
                                  int n_heads, int top_k) {
  std::vector<std::size_t> positions(hidden.rows());
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = i;
  return sparse_causal_attention(hidden, params, n_heads, top_k, positions);
}

// ---------------------------------------------------------------------------
// Unified routing and dual-branch experts
// ---------------------------------------------------------------------------

namespace detail {

/// Top-k selection over logits: score-descending, ties to the lower index;
/// gates are the softmax over the selected logits only.
template <typename T>
void select_experts(const T* logits, int n_experts, int top_k, std::vector<int>& ids,
                    std::vector<T>& gates) {
  std::vector<std::pair<T, int>> scored(static_cast<std::size_t>(n_experts));
  for (int e = 0; e < n_experts; ++e) scored[static_cast<std::size_t>(e)] = {logits[e], e};
  auto better = [](const std::pair<T, int>& a, const std::pair<T, int>& b) {
    return a.first > b.first || (a.first == b.first && a.second < b.second);
  };
  std::partial_sort(scored.begin(), scored.begin() + top_k, scored.end(), better);

  ids.resize(static_cast<std::size_t>(top_k));
  gates.resize(static_cast<std::size_t>(top_k));
  for (int t = 0; t < top_k; ++t) {
    ids[static_cast<std::size_t>(t)] = scored[static_cast<std::size_t>(t)].second;
    gates[static_cast<std::size_t>(t)] = scored[static_cast<std::size_t>(t)].first;
  }
  nn::softmax_inplace(gates.data(), gates.size());
}

template <typename T>
Matrix<T> branch_forward(const BranchWeights<T>& br, const Matrix<T>& x, BranchCache<T>* cache) {
  Matrix<T> gate_pre = nn::linear_forward(br.gate, x);
  Matrix<T> up = nn::linear_forward(br.up, x);
  Matrix<T> mix(gate_pre.rows(), gate_pre.cols());
  for (std::size_t i = 0; i < mix.size(); ++i)
    mix.data()[i] = nn::gelu(gate_pre.data()[i]) * up.data()[i];
  Matrix<T> out = nn::linear_forward(br.down, mix);
  if (cache) {
    cache->x = x;
    cache->gate_pre = std::move(gate_pre);
    cache->up = std::move(up);
    cache->mix = std::move(mix);
    cache->out = out;
  }
  return out;
}

}  // namespace detail

/// Routes one temporal position: the gate sees the concatenated time and
/// wavelet representations and picks the same experts for both pathways.
template <typename T>
std::pair<std::vector<int>, std::vector<T>> route_pair(const std::vector<T>& time_h,
                                                       const std::vector<T>& wavelet_h,
                                                       const nn::Linear<T>& router_hidden,
                                                       const nn::Linear<T>& router_out,
                                                       int top_k) {
  if (time_h.size() != wavelet_h.size() || 2 * time_h.size() != router_hidden.in_dim())
    throw ContractError("route_pair: width mismatch");
  Matrix<T> z(1, 2 * time_h.size());
  for (std::size_t i = 0; i < time_h.size(); ++i) {
    z(0, i) = time_h[i];
    z(0, time_h.size() + i) = wavelet_h[i];
  }
  Matrix<T> hidden = nn::linear_forward(router_hidden, z);
  for (T& v : hidden.storage()) v = nn::gelu(v);
  Matrix<T> logits = nn::linear_forward(router_out, hidden);
  std::vector<int> ids;
  std::vector<T> gates;
  detail::select_experts(logits.row(0), static_cast<int>(router_out.out_dim()), top_k, ids, gates);
  return {std::move(ids), std::move(gates)};
}

/// Applies one expert's two branches; no cross-branch mixing.
template <typename T>
std::pair<std::vector<T>, std::vector<T>> expert_apply(const std::vector<T>& time_h,
                                                       const std::vector<T>& wavelet_h,
                                                       const ExpertWeights<T>& expert) {
  Matrix<T> xt(1, time_h.size()), xw(1, wavelet_h.size());
  std::copy(time_h.begin(), time_h.end(), xt.data());
  std::copy(wavelet_h.begin(), wavelet_h.end(), xw.data());
  const Matrix<T> yt =
      detail::branch_forward(expert.time_branch, xt, static_cast<BranchCache<T>*>(nullptr));
  const Matrix<T> yw =
      detail::branch_forward(expert.wavelet_branch, xw, static_cast<BranchCache<T>*>(nullptr));
  return {std::vector<T>(yt.data(), yt.data() + yt.size()),
          std::vector<T>(yw.data(), yw.data() + yw.size())};
}

/// The MoE sublayer: pre-norm both pathways, route each temporal position,
/// apply the selected experts batched per expert, add the shared expert and
/// the residual. Returns the switch-style balance loss of this layer.
template <typename T>
T moe_layer(Matrix<T>& x_t, Matrix<T>& x_w, const LayerWeights<T>& layer, const ModelConfig& cfg,
            MoECache<T>* cache) {
  const std::size_t n = x_t.rows();
  const std::size_t d = static_cast<std::size_t>(cfg.hidden_size);
  const int n_experts = cfg.n_experts, top_k = cfg.top_k_experts;

  MoECache<T> local;
  MoECache<T>& mc = cache ? *cache : local;

  mc.t_norm = nn::rmsnorm_forward(x_t, layer.moe_norm_time, mc.t_inv_rms);
  mc.w_norm = nn::rmsnorm_forward(x_w, layer.moe_norm_wavelet, mc.w_inv_rms);

  mc.router_in = Matrix<T>(n, 2 * d);
  for (std::size_t i = 0; i < n; ++i) {
    std::copy(mc.t_norm.row(i), mc.t_norm.row(i) + d, mc.router_in.row(i));
    std::copy(mc.w_norm.row(i), mc.w_norm.row(i) + d, mc.router_in.row(i) + d);
  }
  mc.hidden_pre = nn::linear_forward(layer.router_hidden, mc.router_in);
  mc.hidden = mc.hidden_pre;
  for (T& v : mc.hidden.storage()) v = nn::gelu(v);
  mc.logits = nn::linear_forward(layer.router_out, mc.hidden);

  mc.probs = mc.logits;
  for (std::size_t i = 0; i < n; ++i)
    nn::softmax_inplace(mc.probs.row(i), static_cast<std::size_t>(n_experts));

  mc.expert_ids.assign(n, {});
  mc.gates.assign(n, {});
  mc.experts.assign(static_cast<std::size_t>(n_experts), {});
  for (std::size_t i = 0; i < n; ++i) {
    detail::select_experts(mc.logits.row(i), n_experts, top_k, mc.expert_ids[i], mc.gates[i]);
    for (int id : mc.expert_ids[i])
      mc.experts[static_cast<std::size_t>(id)].positions.push_back(i);
  }

  // balance: E * sum_e f_e * p_e ; minimum ~ top_k at uniform routing
  mc.freq.assign(static_cast<std::size_t>(n_experts), T(0));
  for (std::size_t e = 0; e < mc.experts.size(); ++e)
    mc.freq[e] = static_cast<T>(static_cast<double>(mc.experts[e].positions.size()) /
                                static_cast<double>(n));
  double balance = 0.0;
  for (std::size_t e = 0; e < mc.freq.size(); ++e) {
    double p_mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) p_mean += static_cast<double>(mc.probs(i, e));
    p_mean /= static_cast<double>(n);
    balance += static_cast<double>(mc.freq[e]) * p_mean;
  }
  balance *= static_cast<double>(n_experts);
  mc.balance = static_cast<T>(balance);

  Matrix<T> out_t(n, d, T(0)), out_w(n, d, T(0));

  for (std::size_t e = 0; e < mc.experts.size(); ++e) {
    auto& ec = mc.experts[e];
    if (ec.positions.empty()) continue;
    Matrix<T> gathered_t(ec.positions.size(), d), gathered_w(ec.positions.size(), d);
    for (std::size_t r = 0; r < ec.positions.size(); ++r) {
      std::copy(mc.t_norm.row(ec.positions[r]), mc.t_norm.row(ec.positions[r]) + d,
                gathered_t.row(r));
      std::copy(mc.w_norm.row(ec.positions[r]), mc.w_norm.row(ec.positions[r]) + d,
                gathered_w.row(r));
    }
    const auto& expert = layer.experts[e];
    Matrix<T> yt = detail::branch_forward(expert.time_branch, gathered_t,
                                          cache ? &ec.time : nullptr);
    Matrix<T> yw = detail::branch_forward(expert.wavelet_branch, gathered_w,
                                          cache ? &ec.wavelet : nullptr);
    for (std::size_t r = 0; r < ec.positions.size(); ++r) {
      const std::size_t pos = ec.positions[r];
      // gate weight of this expert at this position
      T gate = T(0);
      for (std::size_t s = 0; s < mc.expert_ids[pos].size(); ++s)
        if (mc.expert_ids[pos][s] == static_cast<int>(e)) gate = mc.gates[pos][s];
      T* ot = out_t.row(pos);
      T* ow = out_w.row(pos);
      const T* yt_r = yt.row(r);
      const T* yw_r = yw.row(r);
      for (std::size_t c = 0; c < d; ++c) {
        ot[c] += gate * yt_r[c];
        ow[c] += gate * yw_r[c];
      }
    }
  }

  if (cfg.use_shared_expert) {
    if (cache) {
      mc.shared.positions.resize(n);
      for (std::size_t i = 0; i < n; ++i) mc.shared.positions[i] = i;
    }
    Matrix<T> yt = detail::branch_forward(layer.shared_expert.time_branch, mc.t_norm,
                                          cache ? &mc.shared.time : nullptr);
    Matrix<T> yw = detail::branch_forward(layer.shared_expert.wavelet_branch, mc.w_norm,
                                          cache ? &mc.shared.wavelet : nullptr);
    for (std::size_t i = 0; i < out_t.size(); ++i) {
      out_t.data()[i] += yt.data()[i];
      out_w.data()[i] += yw.data()[i];
    }
  }

  for (std::size_t i = 0; i < x_t.size(); ++i) {
    x_t.data()[i] += out_t.data()[i];
    x_w.data()[i] += out_w.data()[i];
  }
  return mc.balance;
}

// ---------------------------------------------------------------------------
// Full forward pass
// ---------------------------------------------------------------------------

template <typename T>
ForwardTrace<T> forward(const tok::AlignedTokenSequence<T>& tokens, const ModelWeights<T>& weights,
                        ForwardCache<T>* cache = nullptr) {
  const ModelConfig& cfg = weights.config;
  if (tokens.patch_length != static_cast<std::size_t>(cfg.patch_length))
    throw ContractError("forward: token patch length does not match model config");
  if (tokens.n_patches == 0) throw ContractError("forward: empty token sequence");
  if (tokens.time_patches.rows() != tokens.wavelet_patches.rows())
    throw ContractError("forward: pathway token counts differ");
  const std::size_t n = tokens.n_patches;

  std::vector<std::size_t> positions(n);
  for (std::size_t i = 0; i < n; ++i) positions[i] = i;
  const nn::RotaryPhases<T> phases(positions, static_cast<std::size_t>(cfg.head_dim()));

  Matrix<T> x_t = nn::linear_forward(weights.time_embed, tokens.time_patches);
  Matrix<T> x_w = nn::linear_forward(weights.wavelet_embed, tokens.wavelet_patches);

  if (cache) {
    cache->positions = positions;
    cache->layers.assign(weights.layers.size(), {});
  }

  ForwardTrace<T> trace;
  trace.router_assignments.resize(weights.layers.size());
  double balance_sum = 0.0;

  for (std::size_t l = 0; l < weights.layers.size(); ++l) {
    const auto& layer = weights.layers[l];
    LayerCache<T>* lc = cache ? &cache->layers[l] : nullptr;
    if (lc) {
      lc->x_t_in = x_t;
      lc->x_w_in = x_w;
    }

    // pathway-independent sparse causal attention, pre-normalized, residual
    auto attend = [&](Matrix<T>& x, const AttentionWeights<T>& attn, AttentionCache<T>* ac) {
      std::vector<T> inv_rms;
      Matrix<T> normed = nn::rmsnorm_forward(x, attn.norm_gain, inv_rms);
      Matrix<T> attn_out =
          sparse_causal_attention(normed, attn, cfg.n_heads, cfg.top_k_attention, phases, ac);
      if (ac) {
        ac->x_norm = std::move(normed);
        ac->inv_rms = std::move(inv_rms);
      }
      for (std::size_t i = 0; i < x.size(); ++i) x.data()[i] += attn_out.data()[i];
    };
    attend(x_t, layer.time_attn, lc ? &lc->t_attn : nullptr);
    attend(x_w, layer.wavelet_attn, lc ? &lc->w_attn : nullptr);

    if (lc) {
      lc->x_t_mid = x_t;
      lc->x_w_mid = x_w;
    }

    MoECache<T> scratch;
    MoECache<T>& mc = lc ? lc->moe : scratch;
    const T layer_balance = moe_layer(x_t, x_w, layer, cfg, &mc);
    balance_sum += static_cast<double>(layer_balance);

    auto& records = trace.router_assignments[l];
    records.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      records[i].expert_ids = mc.expert_ids[i];
      records[i].gates = mc.gates[i];
    }
  }

  trace.load_balance_loss = static_cast<T>(balance_sum / static_cast<double>(cfg.n_layers));

  std::vector<T> inv_t, inv_w;
  Matrix<T> norm_t = nn::rmsnorm_forward(x_t, weights.final_norm_time, inv_t);
  Matrix<T> norm_w = nn::rmsnorm_forward(x_w, weights.final_norm_wavelet, inv_w);
  Matrix<T> pred_t = nn::linear_forward(weights.time_head, norm_t);
  Matrix<T> pred_w = nn::linear_forward(weights.wavelet_head, norm_w);
  if (cache) {
    cache->final_t_in = std::move(x_t);
    cache->final_w_in = std::move(x_w);
    cache->final_t_norm = std::move(norm_t);
    cache->final_w_norm = std::move(norm_w);
    cache->final_t_inv_rms = std::move(inv_t);
    cache->final_w_inv_rms = std::move(inv_w);
  }

  // next-patch alignment: position j predicts patch j+1
  const std::size_t p = tokens.patch_length;
  trace.time_predictions = Matrix<T>(n - 1, p);
  trace.wavelet_predictions = Matrix<T>(n - 1, p);
  for (std::size_t j = 0; j + 1 < n; ++j)
    for (std::size_t c = 0; c < p; ++c) {
      trace.time_predictions(j, c) = pred_t(j, c);
      trace.wavelet_predictions(j, c) = pred_w(j, c);
    }
  trace.time_next.assign(pred_t.row(n - 1), pred_t.row(n - 1) + p);
  trace.wavelet_next.assign(pred_w.row(n - 1), pred_w.row(n - 1) + p);
  return trace;
}

}  // namespace wavemoe::model
