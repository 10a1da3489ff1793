#pragma once

#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "wavemoe/io.hpp"
#include "wavemoe/matrix.hpp"
#include "wavemoe/model.hpp"

namespace wavemoe::ckpt {

// Checkpoint container ("WMCK", version 1), all integers little-endian:
//   magic[4] | u32 version
//   u32 meta_count   | per entry: name, u8 tag (0=int64, 1=float64), 8-byte value
//   u32 string_count | per entry: name, u32 length, bytes
//   u32 block_count  | per block: name, u8 dtype (0=f32, 1=f64), u32 rows, u32 cols, payload
//   u32 crc32 of everything above
// Strings and names are u16-length-prefixed. Block payloads are row-major.

using MetaValue = std::variant<std::int64_t, double>;
using MetaMap = std::map<std::string, MetaValue>;
using StringMap = std::map<std::string, std::string>;

inline constexpr char kMagic[4] = {'W', 'M', 'C', 'K'};
inline constexpr std::uint32_t kVersion = 1;

template <typename T>
constexpr std::uint8_t dtype_tag() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? 0 : 1;
}

template <typename T>
struct Container {
  MetaMap meta;
  StringMap strings;
  std::vector<std::pair<std::string, Matrix<T>>> blocks;  // in write order

  const Matrix<T>* find_block(const std::string& name) const {
    for (const auto& [n, m] : blocks)
      if (n == name) return &m;
    return nullptr;
  }
};

template <typename T>
void write_container(const std::string& path, const MetaMap& meta, const StringMap& strings,
                     const std::vector<std::pair<std::string, const Matrix<T>*>>& blocks) {
  std::ostringstream body(std::ios::binary);
  body.write(kMagic, 4);
  io::write_le<std::uint32_t>(body, kVersion);

  io::write_le<std::uint32_t>(body, static_cast<std::uint32_t>(meta.size()));
  for (const auto& [name, value] : meta) {
    io::write_string(body, name);
    if (std::holds_alternative<std::int64_t>(value)) {
      io::write_le<std::uint8_t>(body, 0);
      io::write_le<std::int64_t>(body, std::get<std::int64_t>(value));
    } else {
      io::write_le<std::uint8_t>(body, 1);
      io::write_le<double>(body, std::get<double>(value));
    }
  }

  io::write_le<std::uint32_t>(body, static_cast<std::uint32_t>(strings.size()));
  for (const auto& [name, value] : strings) {
    io::write_string(body, name);
    io::write_le<std::uint32_t>(body, static_cast<std::uint32_t>(value.size()));
    body.write(value.data(), static_cast<std::streamsize>(value.size()));
  }

  io::write_le<std::uint32_t>(body, static_cast<std::uint32_t>(blocks.size()));
  for (const auto& [name, m] : blocks) {
    io::write_string(body, name);
    io::write_le<std::uint8_t>(body, dtype_tag<T>());
    io::write_le<std::uint32_t>(body, static_cast<std::uint32_t>(m->rows()));
    io::write_le<std::uint32_t>(body, static_cast<std::uint32_t>(m->cols()));
    io::write_scalar_array(body, m->data(), m->size());
  }

  const std::string payload = body.str();
  const std::uint32_t crc = io::Crc32::of(payload.data(), payload.size());
  auto os = io::open_output(path);
  os.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  io::write_le<std::uint32_t>(os, crc);
  if (!os) throw IoError("failed writing checkpoint: " + path);
}

template <typename T>
Container<T> read_container(const std::string& path) {
  auto is = io::open_input(path);
  is.seekg(0, std::ios::end);
  const auto file_size = static_cast<std::size_t>(is.tellg());
  if (file_size < 12) throw IoError("checkpoint truncated: " + path);
  is.seekg(0);
  std::string payload(file_size - 4, '\0');
  is.read(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (is.gcount() != static_cast<std::streamsize>(payload.size()))
    throw IoError("checkpoint truncated: " + path);
  const auto stored_crc = io::read_le<std::uint32_t>(is);
  if (io::Crc32::of(payload.data(), payload.size()) != stored_crc)
    throw IoError("checkpoint checksum mismatch: " + path);

  std::istringstream body(payload, std::ios::binary);
  char magic[4];
  body.read(magic, 4);
  if (std::string(magic, 4) != std::string(kMagic, 4))
    throw IoError("not a checkpoint file (bad magic): " + path);
  const auto version = io::read_le<std::uint32_t>(body);
  if (version != kVersion)
    throw IoError("unsupported checkpoint format version " + std::to_string(version));

  Container<T> c;
  const auto meta_count = io::read_le<std::uint32_t>(body);
  for (std::uint32_t i = 0; i < meta_count; ++i) {
    const std::string name = io::read_string(body);
    const auto tag = io::read_le<std::uint8_t>(body);
    if (tag == 0)
      c.meta[name] = io::read_le<std::int64_t>(body);
    else
      c.meta[name] = io::read_le<double>(body);
  }
  const auto string_count = io::read_le<std::uint32_t>(body);
  for (std::uint32_t i = 0; i < string_count; ++i) {
    const std::string name = io::read_string(body);
    const auto len = io::read_le<std::uint32_t>(body);
    std::string value(len, '\0');
    body.read(value.data(), len);
    if (body.gcount() != static_cast<std::streamsize>(len))
      throw IoError("checkpoint truncated in string block");
    c.strings[name] = std::move(value);
  }
  const auto block_count = io::read_le<std::uint32_t>(body);
  for (std::uint32_t i = 0; i < block_count; ++i) {
    const std::string name = io::read_string(body);
    const auto dtype = io::read_le<std::uint8_t>(body);
    if (dtype != dtype_tag<T>())
      throw IoError("checkpoint scalar type mismatch for block " + name);
    const auto rows = io::read_le<std::uint32_t>(body);
    const auto cols = io::read_le<std::uint32_t>(body);
    Matrix<T> m(rows, cols);
    io::read_scalar_array(body, m.data(), m.size());
    c.blocks.emplace_back(name, std::move(m));
  }
  return c;
}

inline MetaMap config_to_meta(const model::ModelConfig& c) {
  MetaMap m;
  m["n_layers"] = static_cast<std::int64_t>(c.n_layers);
  m["n_heads"] = static_cast<std::int64_t>(c.n_heads);
  m["n_experts"] = static_cast<std::int64_t>(c.n_experts);
  m["top_k_experts"] = static_cast<std::int64_t>(c.top_k_experts);
  m["hidden_size"] = static_cast<std::int64_t>(c.hidden_size);
  m["ffn_dim"] = static_cast<std::int64_t>(c.ffn_dim);
  m["patch_length"] = static_cast<std::int64_t>(c.patch_length);
  m["top_k_attention"] = static_cast<std::int64_t>(c.top_k_attention);
  m["use_shared_expert"] = static_cast<std::int64_t>(c.use_shared_expert ? 1 : 0);
  m["load_balance_coeff"] = c.load_balance_coeff;
  m["wavelet_loss_weight"] = c.wavelet_loss_weight;
  m["seed"] = static_cast<std::int64_t>(c.seed);
  return m;
}

inline model::ModelConfig config_from_meta(const MetaMap& m) {
  auto geti = [&](const std::string& k) {
    auto it = m.find(k);
    if (it == m.end() || !std::holds_alternative<std::int64_t>(it->second))
      throw IoError("checkpoint missing config field: " + k);
    return std::get<std::int64_t>(it->second);
  };
  auto getf = [&](const std::string& k) {
    auto it = m.find(k);
    if (it == m.end() || !std::holds_alternative<double>(it->second))
      throw IoError("checkpoint missing config field: " + k);
    return std::get<double>(it->second);
  };
  model::ModelConfig c;
  c.n_layers = static_cast<int>(geti("n_layers"));
  c.n_heads = static_cast<int>(geti("n_heads"));
  c.n_experts = static_cast<int>(geti("n_experts"));
  c.top_k_experts = static_cast<int>(geti("top_k_experts"));
  c.hidden_size = static_cast<int>(geti("hidden_size"));
  c.ffn_dim = static_cast<int>(geti("ffn_dim"));
  c.patch_length = static_cast<int>(geti("patch_length"));
  c.top_k_attention = static_cast<int>(geti("top_k_attention"));
  c.use_shared_expert = geti("use_shared_expert") != 0;
  c.load_balance_coeff = getf("load_balance_coeff");
  c.wavelet_loss_weight = getf("wavelet_loss_weight");
  c.seed = static_cast<std::uint64_t>(geti("seed"));
  return c;
}

inline void require_same_config(const model::ModelConfig& a, const model::ModelConfig& b) {
  auto eq_i = [](const char* field, long x, long y) {
    if (x != y)
      throw ContractError(std::string("config mismatch on ") + field + ": " + std::to_string(x) +
                          " vs " + std::to_string(y));
  };
  eq_i("n_layers", a.n_layers, b.n_layers);
  eq_i("n_heads", a.n_heads, b.n_heads);
  eq_i("n_experts", a.n_experts, b.n_experts);
  eq_i("top_k_experts", a.top_k_experts, b.top_k_experts);
  eq_i("hidden_size", a.hidden_size, b.hidden_size);
  eq_i("ffn_dim", a.ffn_dim, b.ffn_dim);
  eq_i("patch_length", a.patch_length, b.patch_length);
  eq_i("top_k_attention", a.top_k_attention, b.top_k_attention);
  eq_i("use_shared_expert", a.use_shared_expert, b.use_shared_expert);
}

/// Writes a model-only checkpoint: config header plus every parameter block
/// in visitor order under "model." names.
template <typename T>
void save_model(const std::string& path, const model::ModelWeights<T>& weights) {
  std::vector<std::pair<std::string, const Matrix<T>*>> blocks;
  model::for_each_param(weights,
                        [&](const std::string& name, const Matrix<T>& m, model::ParamKind) {
                          blocks.emplace_back("model." + name, &m);
                        });
  write_container<T>(path, config_to_meta(weights.config), {}, blocks);
}

/// Fills a weight structure from named blocks with the given prefix,
/// requiring every tensor to be present with the right shape.
template <typename T>
void fill_from_blocks(const Container<T>& c, const std::string& prefix,
                      model::ModelWeights<T>& weights) {
  model::for_each_param(weights, [&](const std::string& name, Matrix<T>& m, model::ParamKind) {
    const Matrix<T>* src = c.find_block(prefix + name);
    if (!src) throw IoError("checkpoint missing parameter block: " + prefix + name);
    if (src->rows() != m.rows() || src->cols() != m.cols())
      throw IoError("checkpoint block shape mismatch: " + prefix + name);
    m = *src;
  });
}

/// Loads a model checkpoint (training checkpoints satisfy this too; their
/// optimizer blocks are ignored).
template <typename T>
model::ModelWeights<T> load_model(const std::string& path) {
  const auto c = read_container<T>(path);
  const model::ModelConfig cfg = config_from_meta(c.meta);
  auto weights = model::allocate_weights<T>(cfg);
  fill_from_blocks(c, "model.", weights);
  return weights;
}

}  // namespace wavemoe::ckpt
