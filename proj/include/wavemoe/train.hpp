#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "wavemoe/checkpoint.hpp"
#include "wavemoe/data.hpp"
#include "wavemoe/gradients.hpp"
#include "wavemoe/losses.hpp"
#include "wavemoe/rng.hpp"
#include "wavemoe/tokenize.hpp"

namespace wavemoe::train {

struct TrainConfig {
  double base_lr = 2e-4;
  int batch_size = 128;
  long total_steps = 100000;
  double warmup_ratio = 0.1;
  double huber_delta = 1.0;
  double wavelet_loss_weight = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double adam_eps = 1e-8;
  double weight_decay = 0.1;
  double grad_clip_norm = 1.0;
  std::uint64_t seed = 42;
  int train_context = 512;  // crop length sampled from each 4096-step window
  long log_interval = 10;
  long checkpoint_interval = 1000;
};

inline void validate(const TrainConfig& c) {
  auto fail = [](const std::string& m) { throw ContractError("invalid train config: " + m); };
  if (c.base_lr <= 0) fail("base_lr must be positive");
  if (c.batch_size < 1) fail("batch_size must be >= 1");
  if (c.total_steps < 0) fail("total_steps must be >= 0");
  if (c.warmup_ratio < 0 || c.warmup_ratio > 1) fail("warmup_ratio must be in [0, 1]");
  if (c.huber_delta <= 0) fail("huber_delta must be positive");
  if (c.wavelet_loss_weight < 0) fail("wavelet_loss_weight must be >= 0");
  if (c.beta1 < 0 || c.beta1 >= 1 || c.beta2 < 0 || c.beta2 >= 1) fail("betas must be in [0, 1)");
  if (c.adam_eps <= 0) fail("adam_eps must be positive");
  if (c.weight_decay < 0) fail("weight_decay must be >= 0");
  if (c.grad_clip_norm < 0) fail("grad_clip_norm must be >= 0");
  if (c.train_context < 1) fail("train_context must be positive");
  if (c.log_interval < 1) fail("log_interval must be >= 1");
  if (c.checkpoint_interval < 1) fail("checkpoint_interval must be >= 1");
}

/// Linear warmup from zero over the first warmup_ratio * total_steps steps,
/// then cosine decay down to base_lr / 100 at total_steps.
inline double lr_at(long step, const TrainConfig& c) {
  if (step < 0 || step > c.total_steps)
    throw ContractError("lr_at: step " + std::to_string(step) + " outside [0, " +
                        std::to_string(c.total_steps) + "]");
  const double warmup_steps = c.warmup_ratio * static_cast<double>(c.total_steps);
  if (static_cast<double>(step) < warmup_steps)
    return c.base_lr * static_cast<double>(step) / warmup_steps;
  const double floor = c.base_lr / 100.0;
  const double span = static_cast<double>(c.total_steps) - warmup_steps;
  if (span <= 0) return c.base_lr;
  const double progress = (static_cast<double>(step) - warmup_steps) / span;
  return floor + (c.base_lr - floor) * 0.5 * (1.0 + std::cos(M_PI * progress));
}

template <typename T>
struct TrainState {
  long step = 0;
  model::ModelWeights<T> weights;
  model::GradientSet<T> moment1, moment2;
  Rng rng;
  // cumulative per-component loss sums since training started
  double sum_total = 0, sum_time = 0, sum_wavelet = 0, sum_balance = 0;
  long loss_count = 0;
};

template <typename T>
TrainState<T> init_train_state(const model::ModelConfig& mcfg, const TrainConfig& tcfg) {
  validate(tcfg);
  TrainState<T> s;
  s.weights = model::init_model<T>(mcfg);
  s.moment1 = model::zeros_like(s.weights);
  s.moment2 = model::zeros_like(s.weights);
  s.rng = Rng(tcfg.seed);
  return s;
}

/// Decoupled-weight-decay update with bias correction for one tensor.
/// t is the 1-based update count.
template <typename T>
void adamw_update_tensor(Matrix<T>& w, const Matrix<T>& g, Matrix<T>& m, Matrix<T>& v, long t,
                         double lr, const TrainConfig& c) {
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double gi = static_cast<double>(g.data()[i]);
    const double mi = c.beta1 * static_cast<double>(m.data()[i]) + (1.0 - c.beta1) * gi;
    const double vi = c.beta2 * static_cast<double>(v.data()[i]) + (1.0 - c.beta2) * gi * gi;
    m.data()[i] = static_cast<T>(mi);
    v.data()[i] = static_cast<T>(vi);
    const double update = (mi / bc1) / (std::sqrt(vi / bc2) + c.adam_eps) +
                          c.weight_decay * static_cast<double>(w.data()[i]);
    w.data()[i] = static_cast<T>(static_cast<double>(w.data()[i]) - lr * update);
  }
}

/// Global-norm clipping followed by one AdamW step at lr_at(state.step).
/// Grads are consumed (clipped in place); the step counter advances.
template <typename T>
void adamw_step(TrainState<T>& state, model::GradientSet<T>& grads, const TrainConfig& c) {
  auto wp = model::collect_params(state.weights);
  auto gp = model::collect_params(grads);
  auto mp = model::collect_params(state.moment1);
  auto vp = model::collect_params(state.moment2);

  double norm_sq = 0.0;
  for (const auto* g : gp)
    for (const T x : g->storage()) norm_sq += static_cast<double>(x) * static_cast<double>(x);
  if (!std::isfinite(norm_sq))
    throw NumericError("adamw_step: non-finite gradient norm at step " +
                       std::to_string(state.step));
  const double norm = std::sqrt(norm_sq);
  if (c.grad_clip_norm > 0 && norm > c.grad_clip_norm) {
    const T scale = static_cast<T>(c.grad_clip_norm / norm);
    for (auto* g : gp)
      for (T& x : g->storage()) x *= scale;
  }

  const double lr = lr_at(state.step, c);
  const long t = state.step + 1;
  for (std::size_t i = 0; i < wp.size(); ++i)
    adamw_update_tensor(*wp[i], *gp[i], *mp[i], *vp[i], t, lr, c);
  ++state.step;
}

// ---------------------------------------------------------------------------
// Training checkpoints
// ---------------------------------------------------------------------------

template <typename T>
void save_checkpoint(const std::string& path, const TrainState<T>& state) {
  ckpt::MetaMap meta = ckpt::config_to_meta(state.weights.config);
  meta["train.step"] = static_cast<std::int64_t>(state.step);
  meta["train.sum_total"] = state.sum_total;
  meta["train.sum_time"] = state.sum_time;
  meta["train.sum_wavelet"] = state.sum_wavelet;
  meta["train.sum_balance"] = state.sum_balance;
  meta["train.loss_count"] = static_cast<std::int64_t>(state.loss_count);
  ckpt::StringMap strings{{"train.rng", state.rng.serialize()}};

  std::vector<std::pair<std::string, const Matrix<T>*>> blocks;
  auto add = [&blocks](const std::string& prefix, const model::ModelWeights<T>& w) {
    model::for_each_param(w, [&](const std::string& name, const Matrix<T>& m, model::ParamKind) {
      blocks.emplace_back(prefix + name, &m);
    });
  };
  add("model.", state.weights);
  add("adam_m.", state.moment1);
  add("adam_v.", state.moment2);
  ckpt::write_container<T>(path, meta, strings, blocks);
}

template <typename T>
TrainState<T> load_checkpoint(const std::string& path) {
  const auto c = ckpt::read_container<T>(path);
  if (!c.meta.count("train.step"))
    throw IoError("not a training checkpoint (no optimizer state): " + path);
  const model::ModelConfig cfg = ckpt::config_from_meta(c.meta);
  TrainState<T> state;
  state.weights = model::allocate_weights<T>(cfg);
  state.moment1 = model::allocate_weights<T>(cfg);
  state.moment2 = model::allocate_weights<T>(cfg);
  ckpt::fill_from_blocks(c, "model.", state.weights);
  ckpt::fill_from_blocks(c, "adam_m.", state.moment1);
  ckpt::fill_from_blocks(c, "adam_v.", state.moment2);
  state.step = static_cast<long>(std::get<std::int64_t>(c.meta.at("train.step")));
  state.sum_total = std::get<double>(c.meta.at("train.sum_total"));
  state.sum_time = std::get<double>(c.meta.at("train.sum_time"));
  state.sum_wavelet = std::get<double>(c.meta.at("train.sum_wavelet"));
  state.sum_balance = std::get<double>(c.meta.at("train.sum_balance"));
  state.loss_count = static_cast<long>(std::get<std::int64_t>(c.meta.at("train.loss_count")));
  state.rng.deserialize(c.strings.at("train.rng"));
  return state;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TrainLogRecord {
  long step = 0;
  double lr = 0;
  double total = 0;
  double time_loss = 0;
  double wavelet_loss = 0;
  double balance_loss = 0;
  double wall_ms = 0;
};

struct TrainOptions {
  std::string out_dir;  // empty: no files written
  std::function<void(const TrainLogRecord&)> on_log;
  std::optional<long> run_steps;  // cap for this invocation (resume support)
};

namespace detail {

inline std::string loss_record_json(const TrainLogRecord& r) {
  nlohmann::json j{{"step", r.step},           {"lr", r.lr},
                   {"total", r.total},         {"time_loss", r.time_loss},
                   {"wavelet_loss", r.wavelet_loss}, {"balance_loss", r.balance_loss},
                   {"wall_ms", r.wall_ms}};
  return j.dump();
}

/// Draws one training sample: balanced window pick, aligned crop, tokenize.
/// Windows whose crop is fully masked are redrawn.
template <typename T>
std::pair<tok::AlignedTokenSequence<T>, tok::TrainingTargets<T>> draw_sample(
    const data::Corpus& corpus, const wavelet::FilterBank<T>& bank, std::size_t context,
    std::size_t patch_length, Rng& rng) {
  for (int attempt = 0; attempt < 100; ++attempt) {
    const auto picks = data::balanced_batch(corpus, 1, rng);
    const data::Window& w = corpus.windows[picks[0]];
    const std::size_t span = w.values.size() - context;
    const std::size_t offset = span == 0 ? 0 : rng.next_below(span + 1);
    std::vector<T> values(context), mask(context);
    for (std::size_t i = 0; i < context; ++i) {
      values[i] = static_cast<T>(w.values[offset + i]);
      mask[i] = static_cast<T>(w.mask[offset + i]);
    }
    try {
      auto [tokens, stats] = tok::tokenize_window(values, mask, bank, patch_length);
      return {std::move(tokens), tok::make_training_targets(tokens)};
    } catch (const DataError&) {
      continue;  // fully-masked crop; redraw
    }
  }
  throw DataError("could not draw a usable training crop after 100 attempts");
}

}  // namespace detail

/// Deterministic single-writer training loop: balanced batches, joint loss,
/// exact gradients, AdamW. Emits a loss record every log_interval steps and a
/// checkpoint every checkpoint_interval steps (plus a final one) when
/// out_dir is set. On numeric divergence the last good checkpoint is written
/// before the error propagates.
template <typename T>
TrainState<T> train_loop(const data::Corpus& corpus, const model::ModelConfig& mcfg,
                         const TrainConfig& tcfg, const TrainOptions& opts = {},
                         std::optional<TrainState<T>> resume = std::nullopt) {
  model::validate(mcfg);
  validate(tcfg);
  if (corpus.windows.empty()) throw DataError("empty corpus: nothing to train on");
  if (tcfg.train_context % (4 * mcfg.patch_length) != 0)
    throw ContractError("train_context " + std::to_string(tcfg.train_context) +
                        " must be divisible by 4 * patch_length = " +
                        std::to_string(4 * mcfg.patch_length));
  if (static_cast<std::size_t>(tcfg.train_context) > corpus.window_length)
    throw ContractError("train_context exceeds corpus window length");
  if (tcfg.train_context < 2 * mcfg.patch_length)
    throw ContractError("train_context must cover at least two patches");

  TrainState<T> state = resume ? std::move(*resume) : init_train_state<T>(mcfg, tcfg);
  if (resume) ckpt::require_same_config(state.weights.config, mcfg);

  const auto bank = wavelet::build_filter_bank<T>("bior2.2");
  const LossSpec spec{tcfg.huber_delta, tcfg.wavelet_loss_weight, mcfg.load_balance_coeff};

  std::ofstream log_file;
  if (!opts.out_dir.empty()) {
    std::filesystem::create_directories(opts.out_dir);
    log_file.open(opts.out_dir + "/loss_log.jsonl",
                  state.step > 0 ? std::ios::app : std::ios::trunc);
  }
  auto checkpoint_path = [&](const std::string& tag) {
    return opts.out_dir + "/checkpoint_" + tag + ".wmck";
  };
  auto emit_checkpoint = [&](const std::string& tag) {
    if (!opts.out_dir.empty()) save_checkpoint(checkpoint_path(tag), state);
  };

  const long stop_step = opts.run_steps
                             ? std::min(state.step + *opts.run_steps, tcfg.total_steps)
                             : tcfg.total_steps;
  const auto t0 = std::chrono::steady_clock::now();

  while (state.step < stop_step) {
    const long step = state.step;
    model::GradientSet<T> batch_grads = model::zeros_like(state.weights);
    auto grad_ptrs = model::collect_params(batch_grads);
    LossComponents batch_loss;

    try {
      for (int b = 0; b < tcfg.batch_size; ++b) {
        auto [tokens, targets] =
            detail::draw_sample(corpus, bank, static_cast<std::size_t>(tcfg.train_context),
                                static_cast<std::size_t>(mcfg.patch_length), state.rng);
        auto result = model::gradients(tokens, targets, state.weights, spec);
        auto sample_ptrs = model::collect_params(result.grads);
        for (std::size_t p = 0; p < grad_ptrs.size(); ++p) {
          const auto& src = sample_ptrs[p]->storage();
          auto& dst = grad_ptrs[p]->storage();
          for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
        }
        batch_loss.total += result.loss.total;
        batch_loss.time += result.loss.time;
        batch_loss.wavelet += result.loss.wavelet;
        batch_loss.balance += result.loss.balance;
      }
      const T inv_batch = static_cast<T>(1.0 / static_cast<double>(tcfg.batch_size));
      for (auto* g : grad_ptrs)
        for (T& x : g->storage()) x *= inv_batch;
      batch_loss.total /= tcfg.batch_size;
      batch_loss.time /= tcfg.batch_size;
      batch_loss.wavelet /= tcfg.batch_size;
      batch_loss.balance /= tcfg.batch_size;
      if (!std::isfinite(batch_loss.total)) throw NumericError("batch loss diverged");
    } catch (const NumericError& e) {
      emit_checkpoint("abort_" + std::to_string(step));
      throw NumericError(std::string(e.what()) + " (step " + std::to_string(step) +
                         "; last good checkpoint written)");
    }

    state.sum_total += batch_loss.total;
    state.sum_time += batch_loss.time;
    state.sum_wavelet += batch_loss.wavelet;
    state.sum_balance += batch_loss.balance;
    ++state.loss_count;

    if (step % tcfg.log_interval == 0) {
      TrainLogRecord rec;
      rec.step = step;
      rec.lr = lr_at(step, tcfg);
      rec.total = batch_loss.total;
      rec.time_loss = batch_loss.time;
      rec.wavelet_loss = batch_loss.wavelet;
      rec.balance_loss = batch_loss.balance;
      rec.wall_ms = std::chrono::duration<double, std::milli>(
                        std::chrono::steady_clock::now() - t0)
                        .count();
      if (log_file.is_open()) log_file << detail::loss_record_json(rec) << "\n" << std::flush;
      if (opts.on_log) opts.on_log(rec);
    }

    try {
      adamw_step(state, batch_grads, tcfg);
    } catch (const NumericError& e) {
      emit_checkpoint("abort_" + std::to_string(step));
      throw NumericError(std::string(e.what()) + " (last good checkpoint written)");
    }

    if (state.step % tcfg.checkpoint_interval == 0 && state.step < stop_step)
      emit_checkpoint(std::to_string(state.step));
  }

  emit_checkpoint("final");
  return state;
}

}  // namespace wavemoe::train
