#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "wavemoe/errors.hpp"
#include "wavemoe/io.hpp"
#include "wavemoe/rng.hpp"

namespace wavemoe::data {

inline constexpr std::size_t kDefaultWindowLength = 4096;
inline constexpr double kNearZero = 1e-6;
inline constexpr double kFilterFraction = 0.20;  // strict ">" at the boundary
inline constexpr double kMinBinFill = 0.50;

struct RawSeries {
  std::string id;
  std::string domain;
  std::vector<double> values;  // may contain NaN/Inf
};

/// A fixed-length training sample. Values are post-imputation (finite), the
/// mask flags positions that participate in the loss, and boundaries mark
/// fragment joins introduced by sequence packing.
struct Window {
  std::vector<float> values;
  std::vector<std::uint8_t> mask;
  std::string domain;
  std::vector<std::uint32_t> fragment_boundaries;
  std::vector<std::string> source_ids;
};

struct Fragment {
  std::vector<double> values;
  std::string domain;
  std::string source_id;
};

/// Raw candidate prior to imputation.
struct WindowCandidate {
  std::vector<double> values;
  std::string domain;
  std::vector<std::uint32_t> fragment_boundaries;
  std::vector<std::string> source_ids;
};

// ---------------------------------------------------------------------------
// Segmentation and packing
// ---------------------------------------------------------------------------

struct SegmentResult {
  std::vector<WindowCandidate> windows;
  std::optional<Fragment> leftover;
};

/// Non-overlapping stride-W segmentation; the tail (and any series shorter
/// than W) becomes a packing-pool fragment.
inline SegmentResult segment_series(const RawSeries& series, std::size_t window_length) {
  if (window_length < 2) throw ContractError("segment_series: window length must be >= 2");
  SegmentResult out;
  const std::size_t full = series.values.size() / window_length;
  for (std::size_t i = 0; i < full; ++i) {
    WindowCandidate w;
    w.values.assign(series.values.begin() + static_cast<std::ptrdiff_t>(i * window_length),
                    series.values.begin() + static_cast<std::ptrdiff_t>((i + 1) * window_length));
    w.domain = series.domain;
    w.source_ids = {series.id};
    out.windows.push_back(std::move(w));
  }
  const std::size_t tail = series.values.size() % window_length;
  if (tail > 0) {
    Fragment f;
    f.values.assign(series.values.end() - static_cast<std::ptrdiff_t>(tail), series.values.end());
    f.domain = series.domain;
    f.source_id = series.id;
    out.leftover = std::move(f);
  }
  return out;
}

struct PackResult {
  std::vector<WindowCandidate> windows;
  std::size_t discarded_bins = 0;
};

/// First-fit-decreasing packing of fragments into length-W windows. Bins are
/// zero-filled on the remainder (those positions are masked out downstream by
/// the exact-zero rule) and dropped entirely when less than half filled.
inline PackResult pack_fragments(std::vector<Fragment> pool, std::size_t window_length) {
  std::stable_sort(pool.begin(), pool.end(), [](const Fragment& a, const Fragment& b) {
    return a.values.size() > b.values.size();
  });

  struct Bin {
    WindowCandidate content;
    std::size_t used = 0;
  };
  std::vector<Bin> bins;
  for (auto& frag : pool) {
    if (frag.values.empty()) continue;
    if (frag.values.size() > window_length) continue;  // cannot happen via segment_series
    Bin* target = nullptr;
    for (auto& bin : bins)
      if (bin.used + frag.values.size() <= window_length) {
        target = &bin;
        break;
      }
    if (!target) {
      bins.emplace_back();
      target = &bins.back();
      target->content.values.assign(window_length, 0.0);
      target->content.domain = frag.domain;
    }
    if (target->used > 0)
      target->content.fragment_boundaries.push_back(static_cast<std::uint32_t>(target->used));
    std::copy(frag.values.begin(), frag.values.end(),
              target->content.values.begin() + static_cast<std::ptrdiff_t>(target->used));
    target->used += frag.values.size();
    target->content.source_ids.push_back(frag.source_id);
  }

  PackResult out;
  for (auto& bin : bins) {
    if (static_cast<double>(bin.used) <
        kMinBinFill * static_cast<double>(window_length)) {
      ++out.discarded_bins;
      continue;
    }
    out.windows.push_back(std::move(bin.content));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Quality filtering and imputation
// ---------------------------------------------------------------------------

enum class RejectReason { None, Missing, NearZero, LowVariability };

inline const char* reject_reason_name(RejectReason r) {
  switch (r) {
    case RejectReason::Missing: return "missing";
    case RejectReason::NearZero: return "near-zero";
    case RejectReason::LowVariability: return "low-variability";
    default: return "none";
  }
}

struct FilterResult {
  bool accepted = true;
  RejectReason reason = RejectReason::None;
};

/// Window-level quality checks on raw (pre-normalization) values, applied in
/// order: (a) missing fraction, (b) near-zero fraction, (c) near-zero
/// fraction of first- or second-order differences over non-missing
/// neighbours. Each threshold is a strict 20%.
inline FilterResult quality_filter(const std::vector<double>& values) {
  const double n = static_cast<double>(values.size());
  if (values.empty()) return {false, RejectReason::Missing};

  std::size_t missing = 0;
  for (double v : values)
    if (!std::isfinite(v)) ++missing;
  if (static_cast<double>(missing) > kFilterFraction * n) return {false, RejectReason::Missing};

  std::size_t near_zero = 0;
  for (double v : values)
    if (std::isfinite(v) && std::abs(v) < kNearZero) ++near_zero;
  if (static_cast<double>(near_zero) > kFilterFraction * n) return {false, RejectReason::NearZero};

  auto diff_check = [&](std::size_t order) {
    std::size_t flat = 0, pairs = 0;
    for (std::size_t i = order; i < values.size(); ++i) {
      bool ok = true;
      for (std::size_t t = 0; t <= order; ++t)
        if (!std::isfinite(values[i - t])) ok = false;
      if (!ok) continue;
      ++pairs;
      const double d = order == 1 ? values[i] - values[i - 1]
                                  : values[i] - 2.0 * values[i - 1] + values[i - 2];
      if (std::abs(d) < kNearZero) ++flat;
    }
    // a window with no valid difference pairs carries no dynamics at all
    if (pairs == 0) return true;
    return static_cast<double>(flat) > kFilterFraction * static_cast<double>(pairs);
  };
  if (diff_check(1) || diff_check(2)) return {false, RejectReason::LowVariability};
  return {true, RejectReason::None};
}

/// NaN/Inf become zero with mask 0; exact zeros keep value 0 with mask 0;
/// everything else passes through with mask 1.
inline std::pair<std::vector<float>, std::vector<std::uint8_t>> impute_and_mask(
    const std::vector<double>& values) {
  std::vector<float> out(values.size(), 0.0f);
  std::vector<std::uint8_t> mask(values.size(), 0);
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) continue;      // value 0, mask 0
    if (values[i] == 0.0) continue;               // value 0, mask 0
    out[i] = static_cast<float>(values[i]);
    mask[i] = 1;
  }
  return {std::move(out), std::move(mask)};
}

// ---------------------------------------------------------------------------
// Corpus assembly
// ---------------------------------------------------------------------------

struct DomainStats {
  std::size_t accepted = 0;
  std::size_t rejected_missing = 0;
  std::size_t rejected_near_zero = 0;
  std::size_t rejected_low_variability = 0;
  std::size_t fragments_pooled = 0;
  std::size_t fragments_rejected = 0;
  std::size_t bins_discarded = 0;
};

struct Corpus {
  std::size_t window_length = kDefaultWindowLength;
  std::vector<Window> windows;  // grouped by domain, emission order
  std::map<std::string, std::vector<std::size_t>> by_domain;

  void index() {
    by_domain.clear();
    for (std::size_t i = 0; i < windows.size(); ++i) by_domain[windows[i].domain].push_back(i);
  }
};

struct BuildResult {
  Corpus corpus;
  std::map<std::string, DomainStats> stats;
};

class CorpusBuilder {
public:
  explicit CorpusBuilder(std::size_t window_length = kDefaultWindowLength)
      : window_length_(window_length) {
    if (window_length < 2) throw ContractError("corpus window length must be >= 2");
  }

  /// Feeds one raw series through segmentation + filtering. Full windows are
  /// filtered at window level; fragments are filtered individually before
  /// entering the per-domain packing pool (a packed bin's zero fill would
  /// otherwise dominate the window-level statistics).
  void add_series(const RawSeries& series) {
    auto segmented = segment_series(series, window_length_);
    auto& st = stats_[series.domain];
    for (auto& cand : segmented.windows) admit(std::move(cand), st);
    if (segmented.leftover) {
      const auto verdict = quality_filter(segmented.leftover->values);
      if (verdict.accepted) {
        pools_[series.domain].push_back(std::move(*segmented.leftover));
        ++st.fragments_pooled;
      } else {
        ++st.fragments_rejected;
      }
    }
  }

  BuildResult finish() {
    for (auto& [domain, pool] : pools_) {
      auto packed = pack_fragments(std::move(pool), window_length_);
      auto& st = stats_[domain];
      st.bins_discarded += packed.discarded_bins;
      for (auto& cand : packed.windows) emit(std::move(cand), st);
    }
    pools_.clear();
    BuildResult out;
    out.corpus.window_length = window_length_;
    out.corpus.windows = std::move(windows_);
    out.corpus.index();
    out.stats = std::move(stats_);
    return out;
  }

private:
  void admit(WindowCandidate&& cand, DomainStats& st) {
    const auto verdict = quality_filter(cand.values);
    if (!verdict.accepted) {
      switch (verdict.reason) {
        case RejectReason::Missing: ++st.rejected_missing; break;
        case RejectReason::NearZero: ++st.rejected_near_zero; break;
        default: ++st.rejected_low_variability; break;
      }
      return;
    }
    emit(std::move(cand), st);
  }

  void emit(WindowCandidate&& cand, DomainStats& st) {
    auto [values, mask] = impute_and_mask(cand.values);
    Window w;
    w.values = std::move(values);
    w.mask = std::move(mask);
    w.domain = std::move(cand.domain);
    w.fragment_boundaries = std::move(cand.fragment_boundaries);
    w.source_ids = std::move(cand.source_ids);
    windows_.push_back(std::move(w));
    ++st.accepted;
  }

  std::size_t window_length_;
  std::vector<Window> windows_;
  std::map<std::string, std::vector<Fragment>> pools_;
  std::map<std::string, DomainStats> stats_;
};

// ---------------------------------------------------------------------------
// Balanced sampling
// ---------------------------------------------------------------------------

/// Every slot draws a domain uniformly among non-empty domains, then a window
/// uniformly within that domain, with replacement.
inline std::vector<std::size_t> balanced_batch(const Corpus& corpus, std::size_t batch_size,
                                               Rng& rng) {
  std::vector<const std::vector<std::size_t>*> domains;
  for (const auto& [name, indices] : corpus.by_domain)
    if (!indices.empty()) domains.push_back(&indices);
  if (domains.empty()) throw DataError("empty corpus: no windows to sample");
  std::vector<std::size_t> picks(batch_size);
  for (std::size_t i = 0; i < batch_size; ++i) {
    const auto& dom = *domains[rng.next_below(domains.size())];
    picks[i] = dom[rng.next_below(dom.size())];
  }
  return picks;
}

// ---------------------------------------------------------------------------
// Corpus file format ("WMCP", version 1)
// ---------------------------------------------------------------------------
//   magic[4] | u32 version | u32 window_length | u32 domain_count
//   per domain: name, u64 window_count
//   u64 offset_table[total_windows]   (absolute file offsets, domain-major)
//   records... | u32 crc32 of everything above
// Record: u16 domain_idx | values window_length x f32 | bit-packed mask
//         | u16 boundary_count, u32 offsets... | u16 source_count, strings...

inline constexpr char kCorpusMagic[4] = {'W', 'M', 'C', 'P'};
inline constexpr std::uint32_t kCorpusVersion = 1;

struct CorpusManifest {
  std::uint32_t version = kCorpusVersion;
  std::uint32_t window_length = 0;
  std::vector<std::pair<std::string, std::uint64_t>> domain_counts;
  std::vector<std::uint64_t> offsets;  // domain-major

  std::uint64_t total_windows() const {
    std::uint64_t n = 0;
    for (const auto& [name, count] : domain_counts) n += count;
    return n;
  }
};

namespace detail {

inline void write_window_record(std::ostream& os, const Window& w, std::uint16_t domain_idx) {
  io::write_le<std::uint16_t>(os, domain_idx);
  io::write_scalar_array(os, w.values.data(), w.values.size());
  std::uint8_t byte = 0;
  for (std::size_t i = 0; i < w.mask.size(); ++i) {
    byte = static_cast<std::uint8_t>(byte | ((w.mask[i] ? 1 : 0) << (i % 8)));
    if (i % 8 == 7 || i + 1 == w.mask.size()) {
      io::write_le<std::uint8_t>(os, byte);
      byte = 0;
    }
  }
  io::write_le<std::uint16_t>(os, static_cast<std::uint16_t>(w.fragment_boundaries.size()));
  for (auto b : w.fragment_boundaries) io::write_le<std::uint32_t>(os, b);
  io::write_le<std::uint16_t>(os, static_cast<std::uint16_t>(w.source_ids.size()));
  for (const auto& s : w.source_ids) io::write_string(os, s);
}

inline Window read_window_record(std::istream& is, const CorpusManifest& manifest) {
  Window w;
  const auto domain_idx = io::read_le<std::uint16_t>(is);
  if (domain_idx >= manifest.domain_counts.size())
    throw IoError("corpus record references unknown domain index");
  w.domain = manifest.domain_counts[domain_idx].first;
  const std::size_t len = manifest.window_length;
  w.values.resize(len);
  io::read_scalar_array(is, w.values.data(), len);
  w.mask.resize(len);
  std::uint8_t byte = 0;
  for (std::size_t i = 0; i < len; ++i) {
    if (i % 8 == 0) byte = io::read_le<std::uint8_t>(is);
    w.mask[i] = (byte >> (i % 8)) & 1;
  }
  const auto n_bounds = io::read_le<std::uint16_t>(is);
  w.fragment_boundaries.resize(n_bounds);
  for (auto& b : w.fragment_boundaries) b = io::read_le<std::uint32_t>(is);
  const auto n_sources = io::read_le<std::uint16_t>(is);
  w.source_ids.resize(n_sources);
  for (auto& s : w.source_ids) s = io::read_string(is);
  return w;
}

}  // namespace detail

inline void write_corpus(const Corpus& corpus, const std::string& path) {
  std::vector<std::string> domain_names;
  for (const auto& [name, indices] : corpus.by_domain)
    if (!indices.empty()) domain_names.push_back(name);

  // serialize records domain-major, tracking relative offsets
  std::ostringstream records(std::ios::binary);
  std::vector<std::uint64_t> rel_offsets;
  std::vector<std::uint64_t> counts;
  for (std::size_t d = 0; d < domain_names.size(); ++d) {
    const auto& indices = corpus.by_domain.at(domain_names[d]);
    counts.push_back(indices.size());
    for (std::size_t idx : indices) {
      rel_offsets.push_back(static_cast<std::uint64_t>(records.tellp()));
      detail::write_window_record(records, corpus.windows[idx], static_cast<std::uint16_t>(d));
    }
  }

  std::ostringstream head(std::ios::binary);
  head.write(kCorpusMagic, 4);
  io::write_le<std::uint32_t>(head, kCorpusVersion);
  io::write_le<std::uint32_t>(head, static_cast<std::uint32_t>(corpus.window_length));
  io::write_le<std::uint32_t>(head, static_cast<std::uint32_t>(domain_names.size()));
  for (std::size_t d = 0; d < domain_names.size(); ++d) {
    io::write_string(head, domain_names[d]);
    io::write_le<std::uint64_t>(head, counts[d]);
  }
  const std::string record_bytes = records.str();
  const std::uint64_t header_size =
      static_cast<std::uint64_t>(head.tellp()) + 8 * rel_offsets.size();
  for (auto rel : rel_offsets) io::write_le<std::uint64_t>(head, header_size + rel);

  const std::string head_bytes = head.str();
  io::Crc32 crc;
  crc.update(head_bytes.data(), head_bytes.size());
  crc.update(record_bytes.data(), record_bytes.size());

  auto os = io::open_output(path);
  os.write(head_bytes.data(), static_cast<std::streamsize>(head_bytes.size()));
  os.write(record_bytes.data(), static_cast<std::streamsize>(record_bytes.size()));
  io::write_le<std::uint32_t>(os, crc.value());
  if (!os) throw IoError("failed writing corpus: " + path);
}

/// Random access reader over a corpus file; windows are fetched on demand.
class CorpusReader {
public:
  explicit CorpusReader(const std::string& path) : path_(path), is_(io::open_input(path)) {
    is_.seekg(0, std::ios::end);
    const auto file_size = static_cast<std::uint64_t>(is_.tellg());
    if (file_size < 16) throw IoError("corpus truncated: " + path);
    is_.seekg(0);

    char magic[4];
    is_.read(magic, 4);
    if (std::string(magic, 4) != std::string(kCorpusMagic, 4))
      throw IoError("not a corpus file (bad magic): " + path);
    manifest_.version = io::read_le<std::uint32_t>(is_);
    if (manifest_.version != kCorpusVersion)
      throw IoError("unsupported corpus format version " + std::to_string(manifest_.version));
    manifest_.window_length = io::read_le<std::uint32_t>(is_);
    const auto n_domains = io::read_le<std::uint32_t>(is_);
    for (std::uint32_t d = 0; d < n_domains; ++d) {
      const std::string name = io::read_string(is_);
      const auto count = io::read_le<std::uint64_t>(is_);
      manifest_.domain_counts.emplace_back(name, count);
    }
    manifest_.offsets.resize(manifest_.total_windows());
    for (auto& off : manifest_.offsets) off = io::read_le<std::uint64_t>(is_);

    // verify the whole-file checksum up front
    is_.seekg(0);
    std::string payload(file_size - 4, '\0');
    is_.read(payload.data(), static_cast<std::streamsize>(payload.size()));
    const auto stored_crc = io::read_le<std::uint32_t>(is_);
    if (io::Crc32::of(payload.data(), payload.size()) != stored_crc)
      throw IoError("corpus checksum mismatch: " + path);
    is_.clear();
  }

  const CorpusManifest& manifest() const { return manifest_; }

  Window read_window(std::size_t index) {
    if (index >= manifest_.offsets.size()) throw ContractError("corpus window index out of range");
    is_.seekg(static_cast<std::streamoff>(manifest_.offsets[index]));
    return detail::read_window_record(is_, manifest_);
  }

  /// Loads everything into memory (the training path at desk scale).
  Corpus read_all() {
    Corpus corpus;
    corpus.window_length = manifest_.window_length;
    corpus.windows.reserve(manifest_.offsets.size());
    for (std::size_t i = 0; i < manifest_.offsets.size(); ++i)
      corpus.windows.push_back(read_window(i));
    corpus.index();
    return corpus;
  }

private:
  std::string path_;
  std::ifstream is_;
  CorpusManifest manifest_;
};

// ---------------------------------------------------------------------------
// Ingestion
// ---------------------------------------------------------------------------

struct IngestOptions {
  std::string value_column = "value";
  std::string id_column = "id";
  std::string domain_column = "domain";
  std::string default_domain = "default";
};

namespace detail {

inline double parse_cell(std::string_view cell) {
  // trim
  while (!cell.empty() && (cell.front() == ' ' || cell.front() == '\t' || cell.front() == '\r'))
    cell.remove_prefix(1);
  while (!cell.empty() && (cell.back() == ' ' || cell.back() == '\t' || cell.back() == '\r'))
    cell.remove_suffix(1);
  if (cell.size() >= 2 && cell.front() == '"' && cell.back() == '"')
    cell = cell.substr(1, cell.size() - 2);
  if (cell.empty()) return std::nan("");
  double v = 0.0;
  const auto* end = cell.data() + cell.size();
  const auto res = std::from_chars(cell.data(), end, v);
  if (res.ec != std::errc() || res.ptr != end) {
    // accept inf/nan spellings that from_chars may reject
    std::string lower(cell);
    std::transform(lower.begin(), lower.end(), lower.begin(), ::tolower);
    if (lower == "inf" || lower == "+inf" || lower == "infinity")
      return std::numeric_limits<double>::infinity();
    if (lower == "-inf" || lower == "-infinity") return -std::numeric_limits<double>::infinity();
    return std::nan("");  // non-numeric cells parse to NaN
  }
  return v;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cur;
  bool quoted = false;
  for (char ch : line) {
    if (ch == '"') {
      quoted = !quoted;
      cur.push_back(ch);
    } else if (ch == ',' && !quoted) {
      cells.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  cells.push_back(cur);
  return cells;
}

inline std::string trimmed(const std::string& s) {
  std::size_t b = 0, e = s.size();
  while (b < e && (s[b] == ' ' || s[b] == '\t' || s[b] == '\r')) ++b;
  while (e > b && (s[e - 1] == ' ' || s[e - 1] == '\t' || s[e - 1] == '\r')) --e;
  std::string out = s.substr(b, e - b);
  if (out.size() >= 2 && out.front() == '"' && out.back() == '"')
    out = out.substr(1, out.size() - 2);
  return out;
}

inline bool is_time_column(std::string name) {
  std::transform(name.begin(), name.end(), name.begin(), ::tolower);
  return name == "date" || name == "time" || name == "timestamp" || name == "datetime";
}

}  // namespace detail

using SeriesSink = std::function<void(RawSeries&&)>;

/// CSV ingestion. Long format (a `value` column, optional `id`/`domain`
/// columns grouping contiguous rows) streams series in file order; wide
/// format (no value column) treats every non-time column as a univariate
/// channel. Non-numeric cells parse to NaN.
inline void ingest_csv(const std::string& path, const IngestOptions& opts,
                       const SeriesSink& sink) {
  auto is = io::open_input(path);
  std::string line;
  if (!std::getline(is, line)) throw DataError("ingestion error: empty file " + path);
  const auto header = detail::split_csv_line(line);
  std::map<std::string, std::size_t> columns;
  for (std::size_t i = 0; i < header.size(); ++i) columns[detail::trimmed(header[i])] = i;

  const std::string stem = [&] {
    const auto slash = path.find_last_of('/');
    std::string name = slash == std::string::npos ? path : path.substr(slash + 1);
    const auto dot = name.find_last_of('.');
    return dot == std::string::npos ? name : name.substr(0, dot);
  }();

  std::size_t line_no = 1;
  if (columns.count(opts.value_column)) {
    // long format
    const std::size_t vcol = columns[opts.value_column];
    const std::size_t no_col = std::numeric_limits<std::size_t>::max();
    const std::size_t icol = columns.count(opts.id_column) ? columns[opts.id_column] : no_col;
    const std::size_t dcol =
        columns.count(opts.domain_column) ? columns[opts.domain_column] : no_col;
    RawSeries current;
    bool open = false;
    auto flush = [&] {
      if (open && !current.values.empty()) sink(std::move(current));
      current = RawSeries{};
      open = false;
    };
    while (std::getline(is, line)) {
      ++line_no;
      if (line.empty()) continue;
      const auto cells = detail::split_csv_line(line);
      if (cells.size() <= vcol)
        throw DataError("ingestion error: " + path + ":" + std::to_string(line_no) +
                        ": missing value column");
      const std::string id = icol < cells.size() ? detail::trimmed(cells[icol]) : stem;
      if (!open || id != current.id) {
        flush();
        current.id = id;
        current.domain = dcol < cells.size() && !detail::trimmed(cells[dcol]).empty()
                             ? detail::trimmed(cells[dcol])
                             : opts.default_domain;
        open = true;
      }
      current.values.push_back(detail::parse_cell(cells[vcol]));
    }
    flush();
  } else {
    // wide format: every non-time column is a channel
    std::vector<std::size_t> channels;
    for (std::size_t i = 0; i < header.size(); ++i)
      if (!detail::is_time_column(detail::trimmed(header[i]))) channels.push_back(i);
    if (channels.empty())
      throw DataError("ingestion error: " + path + ": no usable value columns");
    std::vector<RawSeries> series(channels.size());
    for (std::size_t c = 0; c < channels.size(); ++c) {
      series[c].id = stem + ":" + detail::trimmed(header[channels[c]]);
      series[c].domain = opts.default_domain;
    }
    while (std::getline(is, line)) {
      ++line_no;
      if (line.empty()) continue;
      const auto cells = detail::split_csv_line(line);
      for (std::size_t c = 0; c < channels.size(); ++c)
        series[c].values.push_back(
            channels[c] < cells.size() ? detail::parse_cell(cells[channels[c]]) : std::nan(""));
    }
    for (auto& s : series)
      if (!s.values.empty()) sink(std::move(s));
  }
}

/// JSON-lines ingestion: one {"id", "domain", "values": [...]} object per
/// line. Null or non-numeric array entries become NaN.
inline void ingest_jsonl(const std::string& path, const IngestOptions& opts,
                         const SeriesSink& sink) {
  auto is = io::open_input(path);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw DataError("ingestion error: " + path + ":" + std::to_string(line_no) + ": " +
                      e.what());
    }
    if (!obj.is_object() || !obj.contains("values") || !obj["values"].is_array())
      throw DataError("ingestion error: " + path + ":" + std::to_string(line_no) +
                      ": expected an object with a \"values\" array");
    RawSeries s;
    s.id = obj.value("id", "line" + std::to_string(line_no));
    s.domain = obj.value("domain", opts.default_domain);
    s.values.reserve(obj["values"].size());
    for (const auto& v : obj["values"])
      s.values.push_back(v.is_number() ? v.get<double>() : std::nan(""));
    sink(std::move(s));
  }
}

inline void ingest(const std::string& path, const std::string& format, const IngestOptions& opts,
                   const SeriesSink& sink) {
  if (format == "csv")
    ingest_csv(path, opts, sink);
  else if (format == "jsonl")
    ingest_jsonl(path, opts, sink);
  else
    throw ContractError("unknown ingestion format: " + format + " (expected csv or jsonl)");
}

}  // namespace wavemoe::data
