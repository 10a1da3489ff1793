// wavemoe: corpus preprocessing, training, evaluation, forecasting, and
// checkpoint inspection for the dual-path wavelet/time mixture-of-experts
// forecaster.
//
// Exit codes: 0 success, 2 usage/contract, 3 data, 4 numeric, 5 I/O.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "wavemoe/checkpoint.hpp"
#include "wavemoe/data.hpp"
#include "wavemoe/evalbench.hpp"
#include "wavemoe/train.hpp"

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;
constexpr int kExitIo = 5;

using Scalar = float;

struct ModelFlags {
  wavemoe::model::ModelConfig cfg;

  void attach(CLI::App* app) {
    app->add_option("--layers", cfg.n_layers, "transformer layers");
    app->add_option("--heads", cfg.n_heads, "attention heads");
    app->add_option("--experts", cfg.n_experts, "routed experts per layer");
    app->add_option("--top-k-experts", cfg.top_k_experts, "experts activated per token pair");
    app->add_option("--hidden-size", cfg.hidden_size, "model width");
    app->add_option("--ffn-dim", cfg.ffn_dim, "feed-forward budget per layer");
    app->add_option("--patch-length", cfg.patch_length, "values per token");
    app->add_option("--top-k-attention", cfg.top_k_attention, "keys kept per attention query");
    app->add_flag("--shared-expert,!--no-shared-expert", cfg.use_shared_expert,
                  "always-on shared expert");
    app->add_option("--balance-coeff", cfg.load_balance_coeff, "load-balance loss coefficient");
    app->add_option("--wavelet-weight", cfg.wavelet_loss_weight, "wavelet loss weight");
    app->add_option("--model-seed", cfg.seed, "weight initialization seed");
  }
};

struct TrainFlags {
  wavemoe::train::TrainConfig cfg;

  void attach(CLI::App* app) {
    app->add_option("--lr", cfg.base_lr, "base learning rate");
    app->add_option("--batch-size", cfg.batch_size, "windows per step");
    app->add_option("--steps", cfg.total_steps, "total training steps");
    app->add_option("--warmup-ratio", cfg.warmup_ratio, "fraction of steps spent on warmup");
    app->add_option("--huber-delta", cfg.huber_delta, "Huber transition point");
    app->add_option("--beta1", cfg.beta1, "AdamW beta1");
    app->add_option("--beta2", cfg.beta2, "AdamW beta2");
    app->add_option("--adam-eps", cfg.adam_eps, "AdamW epsilon");
    app->add_option("--weight-decay", cfg.weight_decay, "decoupled weight decay");
    app->add_option("--clip-norm", cfg.grad_clip_norm, "global gradient-norm clip");
    app->add_option("--seed", cfg.seed, "training seed (sampling order)");
    app->add_option("--train-context", cfg.train_context, "crop length per training sample");
    app->add_option("--log-interval", cfg.log_interval, "steps between loss records");
    app->add_option("--checkpoint-interval", cfg.checkpoint_interval,
                    "steps between checkpoints");
  }
};

void write_run_config(CLI::App* sub, const std::string& path) {
  std::ofstream os(path);
  os << sub->config_to_str(true, false);
}

int worker_count(int flag_value) {
  if (flag_value > 0) return flag_value;
  if (const char* env = std::getenv("WAVEMOE_WORKERS")) {
    const int n = std::atoi(env);
    if (n > 0) return n;
  }
  return 1;
}

// ---------------------------------------------------------------------------
// preprocess
// ---------------------------------------------------------------------------

struct PreprocessArgs {
  std::string input, format = "csv", out;
  std::size_t window = wavemoe::data::kDefaultWindowLength;
  wavemoe::data::IngestOptions ingest;
};

int run_preprocess(const PreprocessArgs& a, CLI::App* sub) {
  namespace fs = std::filesystem;
  std::vector<std::string> files;
  if (fs::is_directory(a.input)) {
    for (const auto& e : fs::directory_iterator(a.input)) {
      if (!e.is_regular_file()) continue;
      const auto ext = e.path().extension().string();
      if ((a.format == "csv" && ext == ".csv") || (a.format == "jsonl" && ext == ".jsonl"))
        files.push_back(e.path().string());
    }
  } else if (fs::is_regular_file(a.input)) {
    files.push_back(a.input);
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw wavemoe::DataError("no series found under " + a.input);

  wavemoe::data::CorpusBuilder builder(a.window);
  std::size_t n_series = 0;
  for (const auto& file : files)
    wavemoe::data::ingest(file, a.format, a.ingest, [&](wavemoe::data::RawSeries&& s) {
      ++n_series;
      builder.add_series(s);
    });
  if (n_series == 0) throw wavemoe::DataError("no series found under " + a.input);

  auto result = builder.finish();
  wavemoe::data::write_corpus(result.corpus, a.out);
  write_run_config(sub, a.out + ".run_config.cfg");

  std::size_t accepted = 0, rejected = 0;
  std::cout << std::left << std::setw(18) << "domain" << std::right << std::setw(10) << "accepted"
            << std::setw(12) << "rej_miss" << std::setw(12) << "rej_zero" << std::setw(12)
            << "rej_flat" << std::setw(10) << "frags" << std::setw(12) << "frag_rej"
            << std::setw(12) << "bins_drop" << "\n";
  for (const auto& [domain, st] : result.stats) {
    accepted += st.accepted;
    rejected += st.rejected_missing + st.rejected_near_zero + st.rejected_low_variability;
    std::cout << std::left << std::setw(18) << domain << std::right << std::setw(10) << st.accepted
              << std::setw(12) << st.rejected_missing << std::setw(12) << st.rejected_near_zero
              << std::setw(12) << st.rejected_low_variability << std::setw(10)
              << st.fragments_pooled << std::setw(12) << st.fragments_rejected << std::setw(12)
              << st.bins_discarded << "\n";
  }
  std::cout << accepted << " windows accepted, " << rejected << " rejected\n";
  std::cout << "corpus written to " << a.out << " (" << result.corpus.windows.size()
            << " windows of length " << a.window << ")\n";
  return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string corpus, out, resume;
};

int run_train(const TrainArgs& a, ModelFlags& mf, TrainFlags& tf, CLI::App* sub) {
  wavemoe::data::CorpusReader reader(a.corpus);
  const auto corpus = reader.read_all();
  std::cout << "corpus: " << corpus.windows.size() << " windows, "
            << corpus.by_domain.size() << " domains\n";

  std::filesystem::create_directories(a.out);
  write_run_config(sub, a.out + "/run_config.cfg");

  std::optional<wavemoe::train::TrainState<Scalar>> resume_state;
  if (!a.resume.empty()) {
    resume_state = wavemoe::train::load_checkpoint<Scalar>(a.resume);
    wavemoe::ckpt::require_same_config(resume_state->weights.config, mf.cfg);
    std::cout << "resuming from step " << resume_state->step << "\n";
  }

  wavemoe::train::TrainOptions opts;
  opts.out_dir = a.out;
  opts.on_log = [](const wavemoe::train::TrainLogRecord& r) {
    std::cout << "step " << std::setw(7) << r.step << "  lr " << std::scientific
              << std::setprecision(3) << r.lr << "  loss " << std::fixed << std::setprecision(5)
              << r.total << " (time " << r.time_loss << ", wavelet " << r.wavelet_loss
              << ", balance " << r.balance_loss << ")\n";
  };

  const auto state =
      wavemoe::train::train_loop<Scalar>(corpus, mf.cfg, tf.cfg, opts, std::move(resume_state));
  std::cout << "done at step " << state.step << "; final checkpoint: " << a.out
            << "/checkpoint_final.wmck\n";
  return 0;
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

struct EvaluateArgs {
  std::string model, data, report, plot_dir;
  wavemoe::eval::EvalTask task;
  int workers = 0;
};

int run_evaluate(const EvaluateArgs& a, CLI::App* sub) {
  const auto weights = wavemoe::ckpt::load_model<Scalar>(a.model);
  wavemoe::eval::BenchmarkOptions opts;
  opts.plot_dir = a.plot_dir;
  opts.workers = worker_count(a.workers);
  opts.on_skip = [](const std::string& reason) { std::cerr << "skip: " << reason << "\n"; };

  const auto report = wavemoe::eval::run_benchmark(weights, a.data, a.task, opts);
  wavemoe::eval::write_report(report, a.report);
  write_run_config(sub, a.report + ".run_config.cfg");
  const auto table = wavemoe::eval::render_table(report);
  std::cout << table;
  std::ofstream(a.report + ".txt") << table;
  return 0;
}

// ---------------------------------------------------------------------------
// forecast
// ---------------------------------------------------------------------------

struct ForecastArgs {
  std::string model, series, plot;
  int horizon = 96;
  int context = 0;  // 0: use the eval default (512)
  int fusion = 0;
  std::string value_column = "value";
};

int run_forecast(const ForecastArgs& a) {
  const auto weights = wavemoe::ckpt::load_model<Scalar>(a.model);
  const int context_len = a.context > 0 ? a.context : 512;

  std::vector<wavemoe::data::RawSeries> series;
  wavemoe::data::IngestOptions iopts;
  iopts.value_column = a.value_column;
  const std::string format = a.series.ends_with(".jsonl") ? "jsonl" : "csv";
  wavemoe::data::ingest(a.series, format, iopts,
                        [&](wavemoe::data::RawSeries&& s) { series.push_back(std::move(s)); });
  if (series.empty()) throw wavemoe::DataError("no series found in " + a.series);
  const auto& s = series.front();
  if (s.values.size() < static_cast<std::size_t>(context_len))
    throw wavemoe::DataError("series " + s.id + " is shorter than the context length " +
                             std::to_string(context_len));

  std::vector<Scalar> context(static_cast<std::size_t>(context_len));
  for (std::size_t i = 0; i < context.size(); ++i) {
    const double v = s.values[s.values.size() - context.size() + i];
    if (!std::isfinite(v))
      throw wavemoe::DataError("series " + s.id + " has non-finite values inside the context");
    context[i] = static_cast<Scalar>(v);
  }

  const auto forecast = wavemoe::eval::rollout(
      weights, context, a.horizon,
      a.fusion == 1 ? wavemoe::eval::HeadFusion::Average : wavemoe::eval::HeadFusion::TimeOnly);
  std::cout << std::setprecision(9);
  for (Scalar v : forecast) std::cout << v << "\n";

  if (!a.plot.empty()) {
    std::vector<double> tail(context.end() - std::min<std::size_t>(128, context.size()),
                             context.end());
    std::vector<double> fc(forecast.begin(), forecast.end());
    wavemoe::eval::write_forecast_svg(a.plot, tail, {}, fc);
    std::cerr << "plot written to " << a.plot << "\n";
  }
  return 0;
}

// ---------------------------------------------------------------------------
// inspect
// ---------------------------------------------------------------------------

struct InspectArgs {
  std::string model, config_file, routing_corpus;
  int samples = 32;
};

void print_counts(const wavemoe::model::ModelConfig& cfg) {
  const auto counts = wavemoe::model::count_params(cfg);
  std::cout << "\nparameters\n";
  std::cout << "  dense (embeddings, attention, router, norms, heads): " << counts.dense << "\n";
  std::cout << "  per routed expert: " << counts.per_routed_expert << "  (x" << cfg.n_experts
            << " x " << cfg.n_layers << " layers)\n";
  std::cout << "  shared expert: " << counts.shared_expert << "  (x" << cfg.n_layers
            << " layers, " << (cfg.use_shared_expert ? "enabled" : "disabled") << ")\n";
  std::cout << "  total: " << counts.total << "\n";
  std::cout << "  activated per token (top-" << cfg.top_k_experts << " routed"
            << (cfg.use_shared_expert ? " + shared" : "") << " + dense): " << counts.activated
            << "\n";
}

int run_inspect(const InspectArgs& a) {
  wavemoe::model::ModelConfig cfg;
  std::optional<wavemoe::ckpt::Container<Scalar>> container;
  if (!a.model.empty()) {
    container = wavemoe::ckpt::read_container<Scalar>(a.model);
    cfg = wavemoe::ckpt::config_from_meta(container->meta);
  } else if (!a.config_file.empty()) {
    // parse a key=value config file through the same flag definitions
    CLI::App probe;
    ModelFlags mf;
    mf.attach(&probe);
    probe.set_config("--config")->required();
    std::vector<std::string> argv_like{"--config", a.config_file};
    std::reverse(argv_like.begin(), argv_like.end());
    probe.parse(argv_like);
    cfg = mf.cfg;
  } else {
    throw wavemoe::ContractError("inspect: provide --model or --config");
  }
  wavemoe::model::validate(cfg);

  std::cout << "config\n";
  for (const auto& [k, v] : wavemoe::ckpt::config_to_meta(cfg)) {
    std::cout << "  " << k << " = ";
    if (std::holds_alternative<std::int64_t>(v))
      std::cout << std::get<std::int64_t>(v);
    else
      std::cout << std::get<double>(v);
    std::cout << "\n";
  }

  if (container) {
    std::map<std::string, std::pair<std::size_t, std::uint64_t>> groups;  // count, params
    for (const auto& [name, block] : container->blocks) {
      std::string group = name;
      if (group.rfind("model.layers.", 0) == 0) {
        // collapse the layer index: model.layers.N.rest -> layers.*.component
        const auto rest = group.substr(std::string("model.layers.").size());
        const auto dot = rest.find('.');
        auto component = rest.substr(dot + 1);
        const auto subdot = component.find('.');
        if (subdot != std::string::npos) component = component.substr(0, subdot);
        group = "layers.*." + component;
      }
      groups[group].first += 1;
      groups[group].second += block.size();
    }
    std::cout << "\nblocks (grouped)\n";
    for (const auto& [group, info] : groups)
      std::cout << "  " << std::left << std::setw(36) << group << std::right << std::setw(6)
                << info.first << " blocks " << std::setw(12) << info.second << " params\n";
  }
  print_counts(cfg);

  if (!a.routing_corpus.empty()) {
    if (!container) throw wavemoe::ContractError("routing stats require --model");
    auto weights = wavemoe::model::allocate_weights<Scalar>(cfg);
    wavemoe::ckpt::fill_from_blocks(*container, "model.", weights);

    wavemoe::data::CorpusReader reader(a.routing_corpus);
    const auto corpus = reader.read_all();
    const auto bank = wavemoe::wavelet::build_filter_bank<Scalar>("bior2.2");
    const std::size_t context = std::min<std::size_t>(corpus.window_length, 512);
    const std::size_t usable = context - context % (4 * static_cast<std::size_t>(cfg.patch_length));
    wavemoe::Rng rng(7);

    std::vector<std::vector<double>> freq(static_cast<std::size_t>(cfg.n_layers),
                                          std::vector<double>(cfg.n_experts, 0.0));
    double entropy_sum = 0.0;
    std::size_t entropy_count = 0, routed = 0;
    const std::size_t n_samples =
        std::min<std::size_t>(static_cast<std::size_t>(a.samples), corpus.windows.size());
    for (std::size_t s = 0; s < n_samples; ++s) {
      const auto picks = wavemoe::data::balanced_batch(corpus, 1, rng);
      const auto& w = corpus.windows[picks[0]];
      std::vector<Scalar> values(usable), mask(usable);
      for (std::size_t i = 0; i < usable; ++i) {
        values[i] = static_cast<Scalar>(w.values[i]);
        mask[i] = static_cast<Scalar>(w.mask[i]);
      }
      try {
        auto [tokens, stats] = wavemoe::tok::tokenize_window(values, mask, bank,
                                                             static_cast<std::size_t>(cfg.patch_length));
        wavemoe::model::ForwardCache<Scalar> cache;
        const auto trace = wavemoe::model::forward(tokens, weights, &cache);
        for (std::size_t l = 0; l < cache.layers.size(); ++l) {
          const auto& mc = cache.layers[l].moe;
          for (const auto& ids : mc.expert_ids)
            for (int e : ids) {
              freq[l][static_cast<std::size_t>(e)] += 1.0;
              ++routed;
            }
          for (std::size_t i = 0; i < mc.probs.rows(); ++i) {
            double h = 0.0;
            for (std::size_t e = 0; e < mc.probs.cols(); ++e) {
              const double p = mc.probs(i, e);
              if (p > 0) h -= p * std::log(p);
            }
            entropy_sum += h;
            ++entropy_count;
          }
        }
      } catch (const wavemoe::DataError&) {
        continue;  // fully-masked sample
      }
    }

    std::cout << "\nrouting over " << n_samples << " sampled windows\n";
    for (std::size_t l = 0; l < freq.size(); ++l) {
      double layer_total = 0.0;
      for (double f : freq[l]) layer_total += f;
      std::cout << "  layer " << l << ":";
      for (std::size_t e = 0; e < freq[l].size(); ++e)
        std::cout << "  e" << e << " "
                  << std::fixed << std::setprecision(3)
                  << (layer_total > 0 ? freq[l][e] / layer_total : 0.0);
      std::cout << "\n";
    }
    if (entropy_count > 0)
      std::cout << "  mean gate entropy: " << std::setprecision(4)
                << entropy_sum / static_cast<double>(entropy_count) << " nats (uniform would be "
                << std::log(static_cast<double>(cfg.n_experts)) << ")\n";
    (void)routed;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  // Every subcommand is its own root-level CLI::App so that a flat
  // `key = value` config file applies directly to its options.
  const std::string usage =
      "wavemoe: dual-path wavelet/time mixture-of-experts forecaster\n"
      "\n"
      "usage: wavemoe <subcommand> [options]\n"
      "\n"
      "subcommands:\n"
      "  preprocess   build a training corpus from raw series files\n"
      "  train        train a model on a corpus\n"
      "  evaluate     run the forecasting benchmark over a dataset dir\n"
      "  forecast     forecast the tail of one series\n"
      "  inspect      print config and parameter counts\n"
      "\n"
      "run `wavemoe <subcommand> --help` for the option list.\n";
  if (argc < 2) {
    std::cerr << usage;
    return kExitUsage;
  }
  const std::string sub = argv[1];
  if (sub == "-h" || sub == "--help" || sub == "help") {
    std::cout << usage;
    return 0;
  }

  CLI::App app;
  PreprocessArgs pa;
  TrainArgs ta;
  ModelFlags train_model;
  TrainFlags train_flags;
  EvaluateArgs ea;
  ForecastArgs fa;
  InspectArgs ia;

  if (sub == "preprocess") {
    app.description("build a training corpus from raw series files");
    app.add_option("--input", pa.input, "input file or directory")->required();
    app.add_option("--format", pa.format, "csv or jsonl")->check(CLI::IsMember({"csv", "jsonl"}));
    app.add_option("--out", pa.out, "output corpus path")->required();
    app.add_option("--window", pa.window, "window length");
    app.add_option("--value-col", pa.ingest.value_column, "value column name (csv)");
    app.add_option("--id-col", pa.ingest.id_column, "series id column name (csv)");
    app.add_option("--domain-col", pa.ingest.domain_column, "domain column name (csv)");
    app.add_option("--domain", pa.ingest.default_domain, "domain tag when none is present");
    app.set_config("--config");
  } else if (sub == "train") {
    app.description("train a model on a corpus");
    app.add_option("--corpus", ta.corpus, "corpus file from preprocess")->required();
    app.add_option("--out", ta.out, "output directory")->required();
    app.add_option("--resume", ta.resume, "training checkpoint to resume from");
    train_model.attach(&app);
    train_flags.attach(&app);
    app.set_config("--config");
  } else if (sub == "evaluate") {
    app.description("run the forecasting benchmark over a dataset dir");
    app.add_option("--model", ea.model, "model or training checkpoint")->required();
    app.add_option("--data", ea.data, "directory of csv/jsonl datasets")->required();
    app.add_option("--report", ea.report, "report output path")->required();
    app.add_option("--context", ea.task.context_length, "context length");
    app.add_option("--horizon", ea.task.horizon, "forecast horizon");
    app.add_option("--plot-dir", ea.plot_dir, "emit per-series SVG plots here");
    app.add_option("--fusion", ea.task.head_fusion,
                   "0: time head only (default), 1: average with decoded wavelet head");
    app.add_option("--workers", ea.workers, "parallel evaluation workers");
    app.set_config("--config");
  } else if (sub == "forecast") {
    app.description("forecast the tail of one series");
    app.add_option("--model", fa.model, "model checkpoint")->required();
    app.add_option("--series", fa.series, "csv or jsonl series file")->required();
    app.add_option("--horizon", fa.horizon, "values to forecast");
    app.add_option("--context", fa.context, "context length (default 512)");
    app.add_option("--value-col", fa.value_column, "value column name (csv)");
    app.add_option("--fusion", fa.fusion,
                   "0: time head only (default), 1: average with decoded wavelet head");
    app.add_option("--plot", fa.plot, "write an SVG plot");
  } else if (sub == "inspect") {
    app.description("print config and parameter counts");
    app.add_option("--model", ia.model, "checkpoint to inspect");
    app.add_option("--config", ia.config_file, "inspect a config file instead of a checkpoint");
    app.add_option("--routing-stats", ia.routing_corpus, "corpus for expert routing statistics");
    app.add_option("--samples", ia.samples, "windows to sample for routing stats");
  } else {
    std::cerr << "unknown subcommand: " << sub << "\n\n" << usage;
    return kExitUsage;
  }

  try {
    app.parse(argc - 1, argv + 1);  // argv[1] becomes the program name
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (sub == "preprocess") return run_preprocess(pa, &app);
    if (sub == "train") return run_train(ta, train_model, train_flags, &app);
    if (sub == "evaluate") return run_evaluate(ea, &app);
    if (sub == "forecast") return run_forecast(fa);
    return run_inspect(ia);
  } catch (const wavemoe::ContractError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const wavemoe::DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const wavemoe::NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const wavemoe::IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const CLI::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "unexpected error: " << e.what() << "\n";
    return 1;
  }
}
