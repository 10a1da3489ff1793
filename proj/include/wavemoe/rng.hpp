#pragma once

#include <cstdint>
#include <random>
#include <sstream>
#include <string>

#include "wavemoe/errors.hpp"

namespace wavemoe {

/// Deterministic random source. All randomness in the library flows through
/// this wrapper: draws are derived from raw 64-bit engine output with fixed
/// arithmetic, so sequences are reproducible independent of the standard
/// library's distribution implementations.
class Rng {
public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform double in [0, 1) with 53 random bits.
  double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n). n must be nonzero.
  std::size_t next_below(std::size_t n) {
    if (n == 0) throw ContractError("Rng::next_below: n must be positive");
    return static_cast<std::size_t>(
        (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  /// Uniform double in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * next_unit(); }

  /// Exact textual state for checkpointing.
  std::string serialize() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
  }

  void deserialize(const std::string& s) {
    std::istringstream is(s);
    is >> engine_;
    if (is.fail()) throw IoError("Rng::deserialize: malformed engine state");
  }

  friend bool operator==(const Rng& a, const Rng& b) { return a.engine_ == b.engine_; }

private:
  std::mt19937_64 engine_;
};

}  // namespace wavemoe
