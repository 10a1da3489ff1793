#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>
#include <vector>

#include "test_support.hpp"
#include "wavemoe/gradients.hpp"
#include "wavemoe/tokenize.hpp"

using namespace wavemoe;
using namespace wavemoe::model;
using std::size_t;
using std::vector;

namespace {

ModelConfig gradcheck_config() {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.n_experts = 4;
  c.top_k_experts = 2;
  c.hidden_size = 16;
  c.ffn_dim = 32;
  c.patch_length = 8;
  c.top_k_attention = 4;
  c.use_shared_expert = true;
  c.load_balance_coeff = 0.01;
  c.seed = 9;
  return c;
}

/// Smooth synthetic context through the real tokenizer, with a few masked
/// stretches so the masked-loss path is exercised.
std::pair<tok::AlignedTokenSequence<double>, tok::TrainingTargets<double>> make_case(
    std::uint64_t seed, bool with_mask_holes) {
  std::mt19937_64 gen(seed);
  const size_t len = 64;
  vector<double> x(len), mask(len, 1.0);
  for (size_t t = 0; t < len; ++t)
    x[t] = std::sin(0.31 * static_cast<double>(t)) + 0.5 * std::cos(0.11 * static_cast<double>(t)) +
           0.05 * (static_cast<double>(gen() >> 11) * 0x1.0p-53 - 0.5);
  if (with_mask_holes) {
    mask[5] = 0.0;
    mask[22] = 0.0;
    mask[23] = 0.0;
    mask[40] = 0.0;
  }
  const auto bank = wavelet::build_filter_bank<double>("bior2.2");
  auto [tokens, stats] = tok::tokenize_window(x, mask, bank, 8);
  auto targets = tok::make_training_targets(tokens);
  return {std::move(tokens), std::move(targets)};
}

double loss_of(const tok::AlignedTokenSequence<double>& tokens,
               const tok::TrainingTargets<double>& targets, const ModelWeights<double>& w,
               const train::LossSpec& spec) {
  const auto trace = forward(tokens, w);
  return train::joint_loss(trace, targets, spec).total;
}

struct FlatParams {
  vector<Matrix<double>*> tensors;
  vector<size_t> prefix;  // cumulative sizes
  size_t total = 0;
};

FlatParams flatten(ModelWeights<double>& w) {
  FlatParams f;
  for_each_param(w, [&](const std::string&, Matrix<double>& m, ParamKind) {
    f.tensors.push_back(&m);
    f.total += m.size();
    f.prefix.push_back(f.total);
  });
  return f;
}

double& param_at(FlatParams& f, size_t global) {
  size_t t = 0;
  while (f.prefix[t] <= global) ++t;
  const size_t base = t == 0 ? 0 : f.prefix[t - 1];
  return f.tensors[t]->data()[global - base];
}

}  // namespace

TEST_CASE("finite-difference gradient check") {
  const auto cfg = gradcheck_config();
  const train::LossSpec spec{1.0, 1.0, cfg.load_balance_coeff};

  for (bool holes : {false, true}) {
    auto weights = init_model<double>(cfg);
    auto [tokens, targets] = make_case(holes ? 101 : 100, holes);

    const auto result = gradients(tokens, targets, weights, spec);
    auto grads_flat = flatten(const_cast<GradientSet<double>&>(result.grads));
    auto weights_flat = flatten(weights);
    REQUIRE(grads_flat.total == weights_flat.total);

    const double h = 1e-4;
    std::mt19937_64 pick(777);
    double max_rel = 0.0;
    for (int s = 0; s < 200; ++s) {
      const size_t idx = static_cast<size_t>(
          (static_cast<unsigned __int128>(pick()) * weights_flat.total) >> 64);
      double& wref = param_at(weights_flat, idx);
      const double keep = wref;
      wref = keep + h;
      const double up = loss_of(tokens, targets, weights, spec);
      wref = keep - h;
      const double down = loss_of(tokens, targets, weights, spec);
      wref = keep;
      const double numeric = (up - down) / (2.0 * h);
      const double analytic = param_at(grads_flat, idx);
      const double rel =
          std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-3});
      max_rel = std::max(max_rel, rel);
    }
    INFO("mask holes: " << holes << ", max relative error: " << max_rel);
    REQUIRE(max_rel < 1e-4);
  }
}

TEST_CASE("gradient sparsity contracts") {
  auto cfg = gradcheck_config();

  SECTION("wavelet head is untouched when its loss weight is zero") {
    for (double coeff : {0.0, 0.01}) {
      cfg.load_balance_coeff = coeff;
      auto weights = init_model<double>(cfg);
      auto [tokens, targets] = make_case(200, false);
      const train::LossSpec spec{1.0, /*wavelet_weight=*/0.0, coeff};
      const auto result = gradients(tokens, targets, weights, spec);
      for (double v : result.grads.wavelet_head.w.storage()) REQUIRE(v == 0.0);
      for (double v : result.grads.wavelet_head.b.storage()) REQUIRE(v == 0.0);
      // the time path must still learn
      double time_norm = 0.0;
      for (double v : result.grads.time_head.w.storage()) time_norm += v * v;
      REQUIRE(time_norm > 0.0);
    }
  }
  SECTION("an expert never selected gets exactly zero gradient with balance off") {
    cfg.load_balance_coeff = 0.0;
    auto weights = init_model<double>(cfg);
    // pin routing to experts 0 and 1 everywhere
    for (auto& layer : weights.layers) {
      layer.router_out.b(0, 0) = 60.0;
      layer.router_out.b(0, 1) = 59.0;
    }
    auto [tokens, targets] = make_case(300, false);
    const train::LossSpec spec{1.0, 1.0, 0.0};
    const auto result = gradients(tokens, targets, weights, spec);
    for (const auto& layer_grads : result.grads.layers) {
      for (size_t e : {2u, 3u}) {
        for (const auto* br :
             {&layer_grads.experts[e].time_branch, &layer_grads.experts[e].wavelet_branch}) {
          for (double v : br->gate.w.storage()) REQUIRE(v == 0.0);
          for (double v : br->up.w.storage()) REQUIRE(v == 0.0);
          for (double v : br->down.w.storage()) REQUIRE(v == 0.0);
        }
      }
      // selected experts do receive gradient
      double used_norm = 0.0;
      for (double v : layer_grads.experts[0].time_branch.down.w.storage()) used_norm += v * v;
      REQUIRE(used_norm > 0.0);
    }
  }
  SECTION("non-finite loss raises a numeric error") {
    auto weights = init_model<double>(cfg);
    weights.time_head.w(0, 0) = std::numeric_limits<double>::infinity();
    auto [tokens, targets] = make_case(400, false);
    REQUIRE_THROWS_AS(gradients(tokens, targets, weights, train::LossSpec{}), NumericError);
  }
}
