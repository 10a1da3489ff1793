#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "wavemoe/checkpoint.hpp"
#include "wavemoe/data.hpp"
#include "wavemoe/network.hpp"
#include "wavemoe/tokenize.hpp"

namespace wavemoe::eval {

struct EvalTask {
  int context_length = 512;
  int horizon = 96;
  bool per_window_normalization = true;  // recorded in the report
  int head_fusion = 0;                   // 0: time head only, 1: average
};

inline void validate_task(const EvalTask& t, const model::ModelConfig& cfg) {
  if (t.horizon < 1 || t.horizon % cfg.patch_length != 0)
    throw ContractError("horizon " + std::to_string(t.horizon) +
                        " must be a positive multiple of patch length " +
                        std::to_string(cfg.patch_length));
  if (t.context_length < 2 * cfg.patch_length ||
      t.context_length % (4 * cfg.patch_length) != 0)
    throw ContractError("context " + std::to_string(t.context_length) +
                        " must be divisible by 4 * patch length (" +
                        std::to_string(4 * cfg.patch_length) + ")");
}

/// How the two prediction heads combine into the point forecast. The time
/// head alone is the default; Average blends it with the wavelet head's
/// next-patch coefficients decoded back to the value domain.
enum class HeadFusion { TimeOnly, Average };

namespace detail {

/// Decodes a predicted wavelet-coefficient patch (cD1 | cD2 | cA2 blocks for
/// patch index `patch`) into time-domain values over that patch's interval,
/// by inverting a pyramid that is zero outside the predicted blocks.
template <typename T>
std::vector<T> decode_wavelet_patch(const std::vector<T>& coeffs, std::size_t patch,
                                    std::size_t total_length,
                                    const wavelet::FilterBank<T>& bank) {
  const std::size_t p = coeffs.size();
  const std::size_t half = p / 2, quarter = p / 4;
  wavelet::CoefficientPyramid<T> pyr;
  pyr.levels = 2;
  pyr.original_length = total_length;
  pyr.details = {std::vector<T>(total_length / 4, T(0)),
                 std::vector<T>(total_length / 2, T(0))};
  pyr.approx.assign(total_length / 4, T(0));
  for (std::size_t i = 0; i < half; ++i) pyr.details[1][patch * half + i] = coeffs[i];
  for (std::size_t i = 0; i < quarter; ++i)
    pyr.details[0][patch * quarter + i] = coeffs[half + i];
  for (std::size_t i = 0; i < quarter; ++i)
    pyr.approx[patch * quarter + i] = coeffs[half + quarter + i];
  const auto full = wavelet::idwt_multi(pyr, bank);
  return std::vector<T>(full.begin() + static_cast<std::ptrdiff_t>(patch * p),
                        full.begin() + static_cast<std::ptrdiff_t>((patch + 1) * p));
}

}  // namespace detail

/// Autoregressive point forecast: normalize the context once, then repeatedly
/// tokenize the growing sequence (wavelet tokens recomputed over the full
/// extended sequence), forward, and append the next-patch prediction. With
/// TimeOnly fusion the wavelet head is monitored but not used.
template <typename T>
std::vector<T> rollout(const model::ModelWeights<T>& weights, const std::vector<T>& context,
                       int horizon, HeadFusion fusion = HeadFusion::TimeOnly) {
  const auto& cfg = weights.config;
  const std::size_t p = static_cast<std::size_t>(cfg.patch_length);
  EvalTask probe;
  probe.context_length = static_cast<int>(context.size());
  probe.horizon = horizon;
  validate_task(probe, cfg);
  for (T v : context)
    if (!std::isfinite(static_cast<double>(v)))
      throw ContractError("rollout: context contains non-finite values");

  const std::vector<T> ones(context.size(), T(1));
  auto [seq, stats] = tok::instance_normalize(context, ones);

  const auto bank = wavelet::build_filter_bank<T>("bior2.2");
  const std::size_t steps = static_cast<std::size_t>(horizon) / p;
  for (std::size_t s = 0; s < steps; ++s) {
    const std::vector<T> mask(seq.size(), T(1));
    const auto tokens = tok::build_tokens(seq, mask, bank, p);
    const auto trace = model::forward(tokens, weights);
    std::vector<T> next = trace.time_next;
    if (fusion == HeadFusion::Average) {
      const auto decoded = detail::decode_wavelet_patch(trace.wavelet_next, tokens.n_patches,
                                                        seq.size() + p, bank);
      for (std::size_t i = 0; i < p; ++i) next[i] = (next[i] + decoded[i]) / T(2);
    }
    seq.insert(seq.end(), next.begin(), next.end());
  }

  std::vector<T> forecast(seq.end() - horizon, seq.end());
  return tok::denormalize(forecast, stats);
}

/// Plain MSE/MAE over equal-length vectors (inputs are normalized upstream).
template <typename T>
std::pair<double, double> metrics(const std::vector<T>& forecast, const std::vector<T>& truth) {
  if (forecast.size() != truth.size()) throw ContractError("metrics: length mismatch");
  if (forecast.empty()) throw ContractError("metrics: empty inputs");
  double se = 0.0, ae = 0.0;
  for (std::size_t i = 0; i < forecast.size(); ++i) {
    const double d = static_cast<double>(forecast[i]) - static_cast<double>(truth[i]);
    se += d * d;
    ae += std::abs(d);
  }
  const double n = static_cast<double>(forecast.size());
  return {se / n, ae / n};
}

template <typename T>
struct Baselines {
  std::vector<T> persistence;
  std::vector<T> seasonal;
};

/// Persistence repeats the last context value; seasonal-naive repeats the
/// last `season` values cyclically.
template <typename T>
Baselines<T> naive_baselines(const std::vector<T>& context, int horizon, int season = 24) {
  if (context.empty()) throw ContractError("naive_baselines: empty context");
  if (season < 1 || static_cast<std::size_t>(season) > context.size())
    throw ContractError("naive_baselines: season must be in [1, context length]");
  Baselines<T> b;
  b.persistence.assign(static_cast<std::size_t>(horizon), context.back());
  b.seasonal.resize(static_cast<std::size_t>(horizon));
  const std::size_t start = context.size() - static_cast<std::size_t>(season);
  for (int h = 0; h < horizon; ++h)
    b.seasonal[static_cast<std::size_t>(h)] =
        context[start + static_cast<std::size_t>(h % season)];
  return b;
}

// ---------------------------------------------------------------------------
// Benchmark harness
// ---------------------------------------------------------------------------

struct DatasetResult {
  std::string dataset;
  double mse = 0, mae = 0;
  double baseline_mse = 0, baseline_mae = 0;
  std::size_t n_series = 0;
  std::size_t skipped = 0;
};

struct ForecastReport {
  std::vector<DatasetResult> per_dataset;
  DatasetResult average;  // arithmetic mean of the dataset rows
  int context_length = 0;
  int horizon = 0;
  bool normalized = true;
  std::string config_fingerprint;
  std::vector<std::string> skip_log;
};

namespace detail {

inline std::string fingerprint(const model::ModelConfig& cfg) {
  std::ostringstream os;
  for (const auto& [k, v] : ckpt::config_to_meta(cfg)) {
    os << k << '=';
    if (std::holds_alternative<std::int64_t>(v))
      os << std::get<std::int64_t>(v);
    else
      os << std::get<double>(v);
    os << ';';
  }
  const std::string s = os.str();
  std::uint64_t h = 1469598103934665603ull;  // FNV-1a
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  std::ostringstream hex;
  hex << std::hex << std::setw(16) << std::setfill('0') << h;
  return hex.str();
}

struct SeriesOutcome {
  bool used = false;
  std::string skip_reason;
  double mse = 0, mae = 0, baseline_mse = 0, baseline_mae = 0;
  // kept for plotting
  std::vector<double> context_tail, truth, forecast;
};

template <typename T>
SeriesOutcome evaluate_series(const data::RawSeries& series, const model::ModelWeights<T>& weights,
                              const EvalTask& task) {
  SeriesOutcome out;
  const std::size_t need =
      static_cast<std::size_t>(task.context_length) + static_cast<std::size_t>(task.horizon);
  if (series.values.size() < need) {
    out.skip_reason = "series " + series.id + ": length " +
                      std::to_string(series.values.size()) + " < required " +
                      std::to_string(need);
    return out;
  }
  const std::size_t tail_start = series.values.size() - need;
  for (std::size_t i = tail_start; i < series.values.size(); ++i)
    if (!std::isfinite(series.values[i])) {
      out.skip_reason = "series " + series.id + ": non-finite values in evaluation tail";
      return out;
    }

  std::vector<T> context(static_cast<std::size_t>(task.context_length));
  for (std::size_t i = 0; i < context.size(); ++i)
    context[i] = static_cast<T>(series.values[tail_start + i]);
  std::vector<double> truth(series.values.end() - task.horizon, series.values.end());

  const auto forecast = rollout(weights, context, task.horizon,
                                task.head_fusion == 1 ? HeadFusion::Average
                                                      : HeadFusion::TimeOnly);
  const auto base = naive_baselines(context, task.horizon);

  // metrics in the per-series normalized space, statistics from the context
  const std::vector<T> ones(context.size(), T(1));
  const auto [ignored, stats] = tok::instance_normalize(context, ones);
  auto zscore = [&](double v) {
    return (v - static_cast<double>(stats.mean)) / static_cast<double>(stats.std);
  };
  std::vector<double> z_truth(truth.size()), z_forecast(truth.size()), z_persist(truth.size());
  for (std::size_t i = 0; i < truth.size(); ++i) {
    z_truth[i] = zscore(truth[i]);
    z_forecast[i] = zscore(static_cast<double>(forecast[i]));
    z_persist[i] = zscore(static_cast<double>(base.persistence[i]));
  }
  std::tie(out.mse, out.mae) = metrics(z_forecast, z_truth);
  std::tie(out.baseline_mse, out.baseline_mae) = metrics(z_persist, z_truth);
  out.used = true;

  const std::size_t tail_keep = std::min<std::size_t>(128, context.size());
  out.context_tail.assign(series.values.begin() + static_cast<std::ptrdiff_t>(
                              tail_start + context.size() - tail_keep),
                          series.values.begin() +
                              static_cast<std::ptrdiff_t>(tail_start + context.size()));
  out.truth = truth;
  out.forecast.assign(forecast.begin(), forecast.end());
  return out;
}

}  // namespace detail

/// Minimal SVG line chart: recent context (grey), truth (blue), forecast
/// (red), with a light frame.
inline void write_forecast_svg(const std::string& path, const std::vector<double>& context_tail,
                               const std::vector<double>& truth,
                               const std::vector<double>& forecast) {
  const double width = 860, height = 360, margin = 40;
  std::vector<double> everything;
  for (const auto* v : {&context_tail, &truth, &forecast})
    everything.insert(everything.end(), v->begin(), v->end());
  if (everything.empty()) throw ContractError("write_forecast_svg: nothing to plot");
  double lo = everything[0], hi = everything[0];
  for (double v : everything) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  if (hi - lo < 1e-12) {
    hi += 1.0;
    lo -= 1.0;
  }
  const std::size_t total = context_tail.size() + std::max(truth.size(), forecast.size());
  auto sx = [&](std::size_t i) {
    return margin + (width - 2 * margin) * static_cast<double>(i) /
                        static_cast<double>(total > 1 ? total - 1 : 1);
  };
  auto sy = [&](double v) { return height - margin - (height - 2 * margin) * (v - lo) / (hi - lo); };
  auto polyline = [&](const std::vector<double>& ys, std::size_t x0, const char* color) {
    std::ostringstream os;
    os << "  <polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < ys.size(); ++i)
      os << sx(x0 + i) << ',' << sy(ys[i]) << ' ';
    os << "\"/>\n";
    return os.str();
  };

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
      << "\" viewBox=\"0 0 " << width << ' ' << height << "\">\n"
      << "  <rect x=\"0\" y=\"0\" width=\"" << width << "\" height=\"" << height
      << "\" fill=\"white\"/>\n"
      << "  <rect x=\"" << margin << "\" y=\"" << margin << "\" width=\"" << width - 2 * margin
      << "\" height=\"" << height - 2 * margin
      << "\" fill=\"none\" stroke=\"#cccccc\" stroke-width=\"1\"/>\n";
  svg << polyline(context_tail, 0, "#999999");
  svg << polyline(truth, context_tail.size(), "#1f77b4");
  svg << polyline(forecast, context_tail.size(), "#d62728");
  svg << "  <text x=\"" << margin << "\" y=\"" << margin - 10
      << "\" font-family=\"sans-serif\" font-size=\"12\" fill=\"#333333\">"
      << "grey: context | blue: truth | red: forecast</text>\n</svg>\n";

  auto os = io::open_output(path);
  os << svg.str();
  if (!os) throw IoError("failed writing plot: " + path);
}

struct BenchmarkOptions {
  std::string plot_dir;  // empty: no plots
  int workers = 1;
  std::function<void(const std::string&)> on_skip;
};

/// Runs the tail-window evaluation protocol over every csv/jsonl file in a
/// directory. Each file is one dataset; multivariate files are split into
/// univariate channels.
template <typename T>
ForecastReport run_benchmark(const model::ModelWeights<T>& weights, const std::string& dataset_dir,
                             const EvalTask& task, const BenchmarkOptions& opts = {}) {
  validate_task(task, weights.config);

  std::vector<std::pair<std::string, std::string>> files;  // (dataset, path)
  if (!std::filesystem::is_directory(dataset_dir))
    throw IoError("dataset directory not found: " + dataset_dir);
  for (const auto& entry : std::filesystem::directory_iterator(dataset_dir)) {
    if (!entry.is_regular_file()) continue;
    const auto ext = entry.path().extension().string();
    if (ext == ".csv" || ext == ".jsonl")
      files.emplace_back(entry.path().stem().string(), entry.path().string());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw DataError("no series found in " + dataset_dir);

  ForecastReport report;
  report.context_length = task.context_length;
  report.horizon = task.horizon;
  report.normalized = task.per_window_normalization;
  report.config_fingerprint = detail::fingerprint(weights.config);

  for (const auto& [dataset, path] : files) {
    std::vector<data::RawSeries> series;
    data::ingest(path, path.ends_with(".jsonl") ? "jsonl" : "csv", {},
                 [&](data::RawSeries&& s) { series.push_back(std::move(s)); });

    std::vector<detail::SeriesOutcome> outcomes(series.size());
    const int workers = std::max(1, opts.workers);
    if (workers == 1 || series.size() <= 1) {
      for (std::size_t i = 0; i < series.size(); ++i)
        outcomes[i] = detail::evaluate_series(series[i], weights, task);
    } else {
      std::vector<std::thread> pool;
      std::atomic<std::size_t> next{0};
      for (int w = 0; w < workers; ++w)
        pool.emplace_back([&] {
          for (std::size_t i = next.fetch_add(1); i < series.size(); i = next.fetch_add(1))
            outcomes[i] = detail::evaluate_series(series[i], weights, task);
        });
      for (auto& th : pool) th.join();
    }

    DatasetResult row;
    row.dataset = dataset;
    for (std::size_t i = 0; i < outcomes.size(); ++i) {
      auto& oc = outcomes[i];
      if (!oc.used) {
        ++row.skipped;
        report.skip_log.push_back(dataset + ": " + oc.skip_reason);
        if (opts.on_skip) opts.on_skip(report.skip_log.back());
        continue;
      }
      row.mse += oc.mse;
      row.mae += oc.mae;
      row.baseline_mse += oc.baseline_mse;
      row.baseline_mae += oc.baseline_mae;
      ++row.n_series;
      if (!opts.plot_dir.empty()) {
        std::filesystem::create_directories(opts.plot_dir);
        write_forecast_svg(opts.plot_dir + "/" + dataset + "_" + series[i].id + ".svg",
                           oc.context_tail, oc.truth, oc.forecast);
      }
    }
    if (row.n_series > 0) {
      const double n = static_cast<double>(row.n_series);
      row.mse /= n;
      row.mae /= n;
      row.baseline_mse /= n;
      row.baseline_mae /= n;
    }
    report.per_dataset.push_back(std::move(row));
  }

  DatasetResult avg;
  avg.dataset = "Average";
  std::size_t with_data = 0;
  for (const auto& row : report.per_dataset) {
    if (row.n_series == 0) continue;
    avg.mse += row.mse;
    avg.mae += row.mae;
    avg.baseline_mse += row.baseline_mse;
    avg.baseline_mae += row.baseline_mae;
    avg.n_series += row.n_series;
    avg.skipped += row.skipped;
    ++with_data;
  }
  if (with_data > 0) {
    avg.mse /= static_cast<double>(with_data);
    avg.mae /= static_cast<double>(with_data);
    avg.baseline_mse /= static_cast<double>(with_data);
    avg.baseline_mae /= static_cast<double>(with_data);
  }
  report.average = std::move(avg);
  return report;
}

/// One JSON record per dataset plus a header and the Average row.
inline void write_report(const ForecastReport& report, const std::string& path) {
  auto os = io::open_output(path);
  nlohmann::json header{{"record", "header"},
                        {"context_length", report.context_length},
                        {"horizon", report.horizon},
                        {"normalized", report.normalized},
                        {"metric_space", "per-series z-scored by context statistics"},
                        {"config_fingerprint", report.config_fingerprint}};
  os << header.dump() << "\n";
  auto row_json = [](const DatasetResult& r) {
    return nlohmann::json{{"record", "dataset"},   {"dataset", r.dataset},
                          {"mse", r.mse},          {"mae", r.mae},
                          {"baseline_mse", r.baseline_mse}, {"baseline_mae", r.baseline_mae},
                          {"n_series", r.n_series}, {"skipped", r.skipped}};
  };
  for (const auto& row : report.per_dataset) os << row_json(row).dump() << "\n";
  auto avg = row_json(report.average);
  avg["record"] = "average";
  os << avg.dump() << "\n";
  for (const auto& skip : report.skip_log)
    os << nlohmann::json{{"record", "skip"}, {"reason", skip}}.dump() << "\n";
  if (!os) throw IoError("failed writing report: " + path);
}

/// Fixed-width table for terminals and the .txt companion file.
inline std::string render_table(const ForecastReport& report) {
  std::ostringstream os;
  os << std::left << std::setw(24) << "dataset" << std::right << std::setw(10) << "mse"
     << std::setw(10) << "mae" << std::setw(12) << "base_mse" << std::setw(12) << "base_mae"
     << std::setw(9) << "series" << std::setw(9) << "skipped" << "\n";
  os << std::string(86, '-') << "\n";
  auto line = [&](const DatasetResult& r) {
    os << std::left << std::setw(24) << r.dataset << std::right << std::fixed
       << std::setprecision(4) << std::setw(10) << r.mse << std::setw(10) << r.mae
       << std::setw(12) << r.baseline_mse << std::setw(12) << r.baseline_mae << std::setw(9)
       << r.n_series << std::setw(9) << r.skipped << "\n";
  };
  for (const auto& row : report.per_dataset) line(row);
  os << std::string(86, '-') << "\n";
  line(report.average);
  return os.str();
}

}  // namespace wavemoe::eval
