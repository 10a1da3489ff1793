#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "wavemoe/errors.hpp"
#include "wavemoe/nn.hpp"
#include "wavemoe/rng.hpp"

namespace wavemoe::model {

/// Network hyperparameters. The defaults are the production configuration;
/// tests use much smaller instances of the same shape.
struct ModelConfig {
  int n_layers = 12;
  int n_heads = 12;
  int n_experts = 8;
  int top_k_experts = 2;
  int hidden_size = 384;
  int ffn_dim = 1536;
  int patch_length = 8;
  int top_k_attention = 10;
  bool use_shared_expert = true;
  double load_balance_coeff = 0.01;
  double wavelet_loss_weight = 1.0;
  std::uint64_t seed = 42;

  /// Routed experts split the FFN budget across the activated set; the
  /// always-on shared expert keeps the full width.
  int routed_ffn_hidden() const { return ffn_dim / top_k_experts; }
  int shared_ffn_hidden() const { return ffn_dim; }
  int head_dim() const { return hidden_size / n_heads; }
};

inline void validate(const ModelConfig& c) {
  auto fail = [](const std::string& msg) { throw ContractError("invalid model config: " + msg); };
  if (c.n_layers < 1) fail("n_layers must be >= 1");
  if (c.n_heads < 1) fail("n_heads must be >= 1");
  if (c.hidden_size < 1 || c.hidden_size % c.n_heads != 0)
    fail("hidden_size must be a positive multiple of n_heads");
  if (c.head_dim() % 2 != 0) fail("head dimension must be even for rotary phases");
  if (c.n_experts < 1) fail("n_experts must be >= 1");
  if (c.top_k_experts < 1 || c.top_k_experts > c.n_experts)
    fail("top_k_experts must be in [1, n_experts]");
  if (c.ffn_dim < 1 || c.ffn_dim % c.top_k_experts != 0)
    fail("ffn_dim must be a positive multiple of top_k_experts");
  if (c.patch_length < 4 || c.patch_length % 4 != 0)
    fail("patch_length must be a positive multiple of 4");
  if (c.top_k_attention < 1) fail("top_k_attention must be >= 1");
  if (c.load_balance_coeff < 0) fail("load_balance_coeff must be >= 0");
  if (c.wavelet_loss_weight < 0) fail("wavelet_loss_weight must be >= 0");
}

template <typename T>
struct AttentionWeights {
  Matrix<T> norm_gain;  // 1 x d, pre-attention RMS gain
  nn::Linear<T> q, k, v, o;
};

/// One gated feed-forward branch: down( gelu(gate(x)) .* up(x) ).
template <typename T>
struct BranchWeights {
  nn::Linear<T> gate, up, down;
};

/// Dual-branch expert: routed capacity is shared between pathways but the
/// transformations stay domain-specific.
template <typename T>
struct ExpertWeights {
  BranchWeights<T> time_branch, wavelet_branch;
};

template <typename T>
struct LayerWeights {
  AttentionWeights<T> time_attn, wavelet_attn;
  Matrix<T> moe_norm_time, moe_norm_wavelet;  // 1 x d, pre-MoE RMS gains
  nn::Linear<T> router_hidden;                // 2d -> d
  nn::Linear<T> router_out;                   // d -> n_experts
  std::vector<ExpertWeights<T>> experts;
  ExpertWeights<T> shared_expert;  // allocated only when enabled
};

template <typename T>
struct ModelWeights {
  ModelConfig config;
  nn::Linear<T> time_embed, wavelet_embed;  // P -> d
  std::vector<LayerWeights<T>> layers;
  Matrix<T> final_norm_time, final_norm_wavelet;  // 1 x d
  nn::Linear<T> time_head, wavelet_head;          // d -> P
};

enum class ParamKind { Weight, Bias, Gain };

namespace detail {

template <typename T, typename F>
void visit_linear(nn::Linear<T>& lin, const std::string& name, F&& f) {
  f(name + ".w", lin.w, ParamKind::Weight);
  f(name + ".b", lin.b, ParamKind::Bias);
}

template <typename T, typename F>
void visit_branch(BranchWeights<T>& br, const std::string& name, F&& f) {
  visit_linear(br.gate, name + ".gate", f);
  visit_linear(br.up, name + ".up", f);
  visit_linear(br.down, name + ".down", f);
}

template <typename T, typename F>
void visit_expert(ExpertWeights<T>& e, const std::string& name, F&& f) {
  visit_branch(e.time_branch, name + ".time", f);
  visit_branch(e.wavelet_branch, name + ".wavelet", f);
}

template <typename T, typename F>
void visit_attention(AttentionWeights<T>& a, const std::string& name, F&& f) {
  f(name + ".norm", a.norm_gain, ParamKind::Gain);
  visit_linear(a.q, name + ".q", f);
  visit_linear(a.k, name + ".k", f);
  visit_linear(a.v, name + ".v", f);
  visit_linear(a.o, name + ".o", f);
}

}  // namespace detail

/// Walks every parameter tensor in a frozen, documented order. This order
/// defines weight initialization, checkpoint block layout, and the flat
/// parameter indexing used by the optimizer and the finite-difference tests.
template <typename T, typename F>
void for_each_param(ModelWeights<T>& w, F&& f) {
  detail::visit_linear(w.time_embed, "time_embed", f);
  detail::visit_linear(w.wavelet_embed, "wavelet_embed", f);
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    const std::string base = "layers." + std::to_string(l);
    auto& layer = w.layers[l];
    detail::visit_attention(layer.time_attn, base + ".time_attn", f);
    detail::visit_attention(layer.wavelet_attn, base + ".wavelet_attn", f);
    f(base + ".moe_norm_time", layer.moe_norm_time, ParamKind::Gain);
    f(base + ".moe_norm_wavelet", layer.moe_norm_wavelet, ParamKind::Gain);
    detail::visit_linear(layer.router_hidden, base + ".router.hidden", f);
    detail::visit_linear(layer.router_out, base + ".router.out", f);
    for (std::size_t e = 0; e < layer.experts.size(); ++e)
      detail::visit_expert(layer.experts[e], base + ".experts." + std::to_string(e), f);
    if (w.config.use_shared_expert)
      detail::visit_expert(layer.shared_expert, base + ".shared_expert", f);
  }
  f("final_norm_time", w.final_norm_time, ParamKind::Gain);
  f("final_norm_wavelet", w.final_norm_wavelet, ParamKind::Gain);
  detail::visit_linear(w.time_head, "time_head", f);
  detail::visit_linear(w.wavelet_head, "wavelet_head", f);
}

template <typename T, typename F>
void for_each_param(const ModelWeights<T>& w, F&& f) {
  for_each_param(const_cast<ModelWeights<T>&>(w),
                 [&f](const std::string& name, const Matrix<T>& m, ParamKind kind) {
                   f(name, m, kind);
                 });
}

namespace detail {

template <typename T>
ExpertWeights<T> make_expert(int d, int hidden) {
  ExpertWeights<T> e;
  for (auto* branch : {&e.time_branch, &e.wavelet_branch}) {
    branch->gate = nn::Linear<T>(d, hidden);
    branch->up = nn::Linear<T>(d, hidden);
    branch->down = nn::Linear<T>(hidden, d);
  }
  return e;
}

}  // namespace detail

/// Allocates all parameter tensors for a config (contents unspecified).
template <typename T>
ModelWeights<T> allocate_weights(const ModelConfig& c) {
  validate(c);
  const int d = c.hidden_size, p = c.patch_length;
  ModelWeights<T> w;
  w.config = c;
  w.time_embed = nn::Linear<T>(p, d);
  w.wavelet_embed = nn::Linear<T>(p, d);
  w.layers.resize(static_cast<std::size_t>(c.n_layers));
  for (auto& layer : w.layers) {
    for (auto* attn : {&layer.time_attn, &layer.wavelet_attn}) {
      attn->norm_gain = Matrix<T>(1, d);
      attn->q = nn::Linear<T>(d, d);
      attn->k = nn::Linear<T>(d, d);
      attn->v = nn::Linear<T>(d, d);
      attn->o = nn::Linear<T>(d, d);
    }
    layer.moe_norm_time = Matrix<T>(1, d);
    layer.moe_norm_wavelet = Matrix<T>(1, d);
    layer.router_hidden = nn::Linear<T>(2 * d, d);
    layer.router_out = nn::Linear<T>(d, c.n_experts);
    layer.experts.resize(static_cast<std::size_t>(c.n_experts));
    for (auto& e : layer.experts) e = detail::make_expert<T>(d, c.routed_ffn_hidden());
    if (c.use_shared_expert) layer.shared_expert = detail::make_expert<T>(d, c.shared_ffn_hidden());
  }
  w.final_norm_time = Matrix<T>(1, d);
  w.final_norm_wavelet = Matrix<T>(1, d);
  w.time_head = nn::Linear<T>(d, p);
  w.wavelet_head = nn::Linear<T>(d, p);
  return w;
}

/// Deterministic initialization: weights ~ U(-s, s) with s = 1/sqrt(fan_in),
/// biases zero, normalization gains one.
template <typename T>
ModelWeights<T> init_model(const ModelConfig& c) {
  ModelWeights<T> w = allocate_weights<T>(c);
  Rng rng(c.seed);
  for_each_param(w, [&rng](const std::string&, Matrix<T>& m, ParamKind kind) {
    switch (kind) {
      case ParamKind::Weight: {
        const double scale = 1.0 / std::sqrt(static_cast<double>(m.rows()));
        for (T& v : m.storage()) v = static_cast<T>(rng.uniform(-scale, scale));
        break;
      }
      case ParamKind::Bias:
        m.fill(T(0));
        break;
      case ParamKind::Gain:
        m.fill(T(1));
        break;
    }
  });
  return w;
}

/// Same-shape zero copy, used for gradients and optimizer moments.
template <typename T>
ModelWeights<T> zeros_like(const ModelWeights<T>& w) {
  ModelWeights<T> z = allocate_weights<T>(w.config);
  for_each_param(z, [](const std::string&, Matrix<T>& m, ParamKind) { m.fill(T(0)); });
  return z;
}

/// Stable flat view over the parameter tensors (visitor order).
template <typename T>
std::vector<Matrix<T>*> collect_params(ModelWeights<T>& w) {
  std::vector<Matrix<T>*> out;
  for_each_param(w, [&](const std::string&, Matrix<T>& m, ParamKind) { out.push_back(&m); });
  return out;
}

struct ParamCounts {
  std::uint64_t total = 0;
  std::uint64_t activated = 0;
  std::uint64_t dense = 0;
  std::uint64_t per_routed_expert = 0;
  std::uint64_t shared_expert = 0;
};

/// Parameter-count arithmetic from shapes alone; no tensors are allocated.
/// Activated = dense parts + top-k routed experts + shared expert (if on).
inline ParamCounts count_params(const ModelConfig& c) {
  validate(c);
  const std::uint64_t d = static_cast<std::uint64_t>(c.hidden_size);
  const std::uint64_t p = static_cast<std::uint64_t>(c.patch_length);
  const std::uint64_t e = static_cast<std::uint64_t>(c.n_experts);
  const std::uint64_t layers = static_cast<std::uint64_t>(c.n_layers);

  auto linear = [](std::uint64_t in, std::uint64_t out) { return in * out + out; };
  auto branch = [&](std::uint64_t hidden) {
    return linear(d, hidden) * 2 + linear(hidden, d);
  };
  auto expert = [&](std::uint64_t hidden) { return 2 * branch(hidden); };

  ParamCounts counts;
  counts.per_routed_expert = expert(static_cast<std::uint64_t>(c.routed_ffn_hidden()));
  counts.shared_expert =
      c.use_shared_expert ? expert(static_cast<std::uint64_t>(c.shared_ffn_hidden())) : 0;

  const std::uint64_t attention_block = d + 4 * linear(d, d);  // gain + q,k,v,o
  const std::uint64_t router = linear(2 * d, d) + linear(d, e);
  const std::uint64_t dense_per_layer = 2 * attention_block + 2 * d + router;
  const std::uint64_t dense_outer = 2 * linear(p, d) + 2 * linear(d, p) + 2 * d;

  counts.dense = layers * dense_per_layer + dense_outer;
  counts.total = counts.dense + layers * (e * counts.per_routed_expert + counts.shared_expert);
  counts.activated =
      counts.dense + layers * (static_cast<std::uint64_t>(c.top_k_experts) *
                                   counts.per_routed_expert +
                               counts.shared_expert);
  return counts;
}

}  // namespace wavemoe::model
