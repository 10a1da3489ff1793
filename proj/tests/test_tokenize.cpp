#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>
#include <vector>

#include "test_support.hpp"
#include "wavemoe/tokenize.hpp"

using namespace wavemoe;
using namespace wavemoe::tok;
using std::vector;

TEST_CASE("instance_normalize") {
  SECTION("population statistics over valid positions") {
    const vector<double> x{1, 2, 3, 4}, mask(4, 1.0);
    const auto [z, stats] = instance_normalize(x, mask);
    REQUIRE(stats.mean == 2.5);
    REQUIRE(std::abs(stats.std - std::sqrt(1.25)) < 1e-12);
    double mean = 0;
    for (double v : z) mean += v / 4.0;
    REQUIRE(std::abs(mean) < 1e-12);
  }
  SECTION("constant window: floored std, zero output") {
    const vector<double> x(4, 5.0), mask(4, 1.0);
    const auto [z, stats] = instance_normalize(x, mask);
    REQUIRE(stats.std == 1e-8);
    for (double v : z) REQUIRE(v == 0.0);
  }
  SECTION("masked positions are ignored and zeroed") {
    const vector<double> x{1, 100, 3, -7};
    const vector<double> mask{1, 0, 1, 0};
    const auto [z, stats] = instance_normalize(x, mask);
    REQUIRE(stats.mean == 2.0);
    REQUIRE(z[1] == 0.0);
    REQUIRE(z[3] == 0.0);
  }
  SECTION("all-masked window rejected") {
    REQUIRE_THROWS_AS(instance_normalize(vector<double>{1, 2}, vector<double>{0, 0}), DataError);
  }
  SECTION("denormalize round-trip") {
    std::mt19937_64 gen(5);
    const auto x = testsup::random_vector(gen, 64, -20.0, 20.0);
    const vector<double> mask(64, 1.0);
    const auto [z, stats] = instance_normalize(x, mask);
    const auto back = denormalize(z, stats);
    for (std::size_t i = 0; i < x.size(); ++i) REQUIRE(std::abs(back[i] - x[i]) < 1e-9);
  }
}

TEST_CASE("patchify_time") {
  SECTION("context 512 with patch length 8 gives 64 patches") {
    const vector<double> x(512, 1.0);
    const auto m = patchify_time(x, 8);
    REQUIRE(m.rows() == 64);
    REQUIRE(m.cols() == 8);
  }
  SECTION("single full patch") {
    const vector<double> x{1, 2, 3, 4, 5, 6, 7, 8};
    const auto m = patchify_time(x, 8);
    REQUIRE(m.rows() == 1);
    for (int i = 0; i < 8; ++i) REQUIRE(m(0, i) == x[i]);
  }
  SECTION("non-divisible length rejected") {
    REQUIRE_THROWS_AS(patchify_time(vector<double>(9, 0.0), 8), ContractError);
  }
}

TEST_CASE("patchify_wavelet") {
  const auto bank = wavelet::build_filter_bank<double>("bior2.2");

  SECTION("block layout: 4 cD1 + 2 cD2 + 2 cA2 per patch at P=8") {
    std::mt19937_64 gen(23);
    const auto x = testsup::random_vector(gen, 512);
    const auto pyr = wavelet::dwt_multi(x, bank, 2);
    const auto m = patchify_wavelet(pyr, 8);
    REQUIRE(m.rows() == 64);
    REQUIRE(m.cols() == 8);
    for (std::size_t j = 0; j < 64; ++j) {
      for (int i = 0; i < 4; ++i) REQUIRE(m(j, i) == pyr.details[1][j * 4 + i]);
      for (int i = 0; i < 2; ++i) REQUIRE(m(j, 4 + i) == pyr.details[0][j * 2 + i]);
      for (int i = 0; i < 2; ++i) REQUIRE(m(j, 6 + i) == pyr.approx[j * 2 + i]);
    }
  }
  SECTION("all-zero pyramid gives all-zero patches") {
    const auto pyr = wavelet::dwt_multi(vector<double>(64, 0.0), bank, 2);
    const auto m = patchify_wavelet(pyr, 8);
    for (double v : m.storage()) REQUIRE(v == 0.0);
  }
  SECTION("patch length not divisible by 4 rejected") {
    const auto pyr = wavelet::dwt_multi(vector<double>(48, 1.0), bank, 2);
    REQUIRE_THROWS_AS(patchify_wavelet(pyr, 6), ContractError);
  }
  SECTION("level-1 pyramid rejected") {
    const auto pyr = wavelet::dwt_multi(vector<double>(64, 1.0), bank, 1);
    REQUIRE_THROWS_AS(patchify_wavelet(pyr, 8), ContractError);
  }
}

TEST_CASE("temporal alignment is local") {
  // Perturbing one sample inside time patch j may only change wavelet patches
  // within circular distance w = ceil(filter_length / P) + 1 of j.
  const auto bank = wavelet::build_filter_bank<double>("bior2.2");
  const std::size_t patch_len = 8;
  const std::size_t w =
      (bank.analysis_low.size() + patch_len - 1) / patch_len + 1;  // = 2 for bior2.2
  std::mt19937_64 gen(29);
  for (std::size_t len : {16u, 32u, 64u}) {
    const auto x = testsup::random_vector(gen, len);
    const auto base = patchify_wavelet(wavelet::dwt_multi(x, bank, 2), patch_len);
    const std::size_t n = len / patch_len;
    for (std::size_t pos = 0; pos < len; ++pos) {
      auto pert = x;
      pert[pos] += 1.0;
      const auto moved = patchify_wavelet(wavelet::dwt_multi(pert, bank, 2), patch_len);
      const std::size_t j = pos / patch_len;
      for (std::size_t j2 = 0; j2 < n; ++j2) {
        const std::size_t forward = (j2 + n - j) % n;
        const std::size_t circ = std::min(forward, n - forward);
        if (circ > w) {
          for (std::size_t i = 0; i < patch_len; ++i) REQUIRE(moved(j2, i) == base(j2, i));
        }
      }
    }
  }
}

TEST_CASE("make_training_targets") {
  const auto bank = wavelet::build_filter_bank<double>("bior2.2");
  std::mt19937_64 gen(31);

  SECTION("shift-by-one targets") {
    const auto x = testsup::random_vector(gen, 512);
    const vector<double> mask(512, 1.0);
    const auto [tokens, stats] = tokenize_window(x, mask, bank, 8);
    REQUIRE(tokens.n_patches == 64);
    const auto targets = make_training_targets(tokens);
    REQUIRE(targets.time_targets.rows() == 63);
    REQUIRE(targets.wavelet_targets.rows() == 63);
    for (std::size_t j = 0; j < 63; ++j)
      for (std::size_t i = 0; i < 8; ++i) {
        REQUIRE(targets.time_targets(j, i) == tokens.time_patches(j + 1, i));
        REQUIRE(targets.wavelet_targets(j, i) == tokens.wavelet_patches(j + 1, i));
      }
  }
  SECTION("fully-masked target patch produces a zero mask row") {
    auto x = testsup::random_vector(gen, 32);
    vector<double> mask(32, 1.0);
    for (std::size_t i = 8; i < 16; ++i) mask[i] = 0.0;  // patch 1 fully masked
    const auto [tokens, stats] = tokenize_window(x, mask, bank, 8);
    const auto targets = make_training_targets(tokens);
    for (std::size_t i = 0; i < 8; ++i) REQUIRE(targets.target_mask(0, i) == 0.0);
    for (std::size_t i = 0; i < 8; ++i) REQUIRE(targets.target_mask(1, i) == 1.0);
  }
  SECTION("single-patch context rejected") {
    const auto x = testsup::random_vector(gen, 8);
    const vector<double> mask(8, 1.0);
    const auto [tokens, stats] = tokenize_window(x, mask, bank, 8);
    REQUIRE_THROWS_AS(make_training_targets(tokens), ContractError);
  }
}

TEST_CASE("token-count equality across pathways") {
  const auto bank = wavelet::build_filter_bank<double>("bior2.2");
  std::mt19937_64 gen(37);
  for (std::size_t c : {32u, 64u, 128u, 512u, 520u, 1024u}) {
    for (std::size_t p : {4u, 8u, 16u}) {
      if (c % p != 0) continue;
      const auto x = testsup::random_vector(gen, c);
      const vector<double> mask(c, 1.0);
      const auto [tokens, stats] = tokenize_window(x, mask, bank, p);
      REQUIRE(tokens.time_patches.rows() == tokens.wavelet_patches.rows());
      REQUIRE(tokens.n_patches == c / p);
    }
  }
}
