#include <algorithm>
#include <array>
#include <set>

#include "doctest.h"
#include "semmask/common.hpp"
#include "semmask/rng.hpp"

using namespace semmask;

namespace {

// Straight transcription of the published xoshiro256** and splitmix64 reference code.
struct RefXoshiro {
  std::array<std::uint64_t, 4> s{};
  explicit RefXoshiro(std::uint64_t seed) {
    std::uint64_t x = seed;
    for (auto &w : s) {
      std::uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
      z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
      z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
      w = z ^ (z >> 31);
    }
  }
  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
  std::uint64_t next() {
    const std::uint64_t result = rotl(s[1] * 5, 7) * 9;
    const std::uint64_t t = s[1] << 17;
    s[2] ^= s[0];
    s[3] ^= s[1];
    s[1] ^= s[2];
    s[0] ^= s[3];
    s[2] ^= t;
    s[3] = rotl(s[3], 45);
    return result;
  }
};

}  // namespace

TEST_CASE("round_half_even breaks ties toward the even neighbour") {
  CHECK(round_half_even(0.5) == 0);
  CHECK(round_half_even(1.5) == 2);
  CHECK(round_half_even(2.5) == 2);
  CHECK(round_half_even(3.5) == 4);
  CHECK(round_half_even(2.4999) == 2);
  CHECK(round_half_even(2.5001) == 3);
  CHECK(round_half_even(-0.5) == 0);
  CHECK(round_half_even(-1.5) == -2);
  CHECK(round_half_even(7.0) == 7);
}

TEST_CASE("masking budget rounds rho * N") {
  CHECK(masking_budget(0.7, 10) == 7);
  CHECK(masking_budget(0.7, 0) == 0);
  CHECK(masking_budget(0.5, 5) == 2);
  CHECK(masking_budget(0.5, 7) == 4);
  CHECK(masking_budget(1.0, 13) == 13);
  CHECK(masking_budget(0.0, 13) == 0);
  CHECK(masking_budget(0.7, 1000) == 700);
}

TEST_CASE("generator matches the reference xoshiro256** stream") {
  for (std::uint64_t seed : {0ULL, 1ULL, 42ULL, 0xDEADBEEFULL, ~0ULL}) {
    Rng rng(seed);
    RefXoshiro ref(seed);
    for (int i = 0; i < 1000; ++i) REQUIRE(rng.next() == ref.next());
  }
}

TEST_CASE("below stays in range and covers every value") {
  Rng rng(7);
  for (std::uint64_t n : {1ULL, 2ULL, 3ULL, 10ULL, 1000ULL}) {
    std::set<std::uint64_t> seen;
    for (int i = 0; i < 20000; ++i) {
      const auto v = rng.below(n);
      REQUIRE(v < n);
      seen.insert(v);
    }
    CHECK(seen.size() == n);
  }
}

TEST_CASE("below is close to uniform") {
  Rng rng(11);
  constexpr int kBins = 7;
  constexpr int kDraws = 70000;
  std::array<int, kBins> counts{};
  for (int i = 0; i < kDraws; ++i) ++counts[rng.below(kBins)];
  double chi2 = 0.0;
  const double expected = static_cast<double>(kDraws) / kBins;
  for (int c : counts) chi2 += (c - expected) * (c - expected) / expected;
  CHECK(chi2 < 22.46);  // 6 dof, p = 0.001
}

TEST_CASE("uniform lies in [0, 1) and uses 53 bits") {
  Rng rng(3);
  RefXoshiro ref(3);
  for (int i = 0; i < 1000; ++i) {
    const double u = rng.uniform();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
    CHECK(u == static_cast<double>(ref.next() >> 11) / 9007199254740992.0);
  }
}

TEST_CASE("derive_seed separates streams") {
  std::set<std::uint64_t> seeds;
  for (std::uint64_t root = 0; root < 10; ++root) {
    for (std::uint64_t stream = 0; stream < 10; ++stream) seeds.insert(derive_seed(root, stream));
  }
  CHECK(seeds.size() == 100);
  CHECK(derive_seed(5, 2) == derive_seed(5, 2));
}

TEST_CASE("sample_without_replacement draws distinct positions") {
  Rng rng(9);
  for (std::size_t n : {0, 1, 5, 50}) {
    for (std::size_t k = 0; k <= n; ++k) {
      auto picks = sample_without_replacement(n, k, rng);
      REQUIRE(picks.size() == k);
      std::set<std::size_t> unique(picks.begin(), picks.end());
      CHECK(unique.size() == k);
      CHECK(std::all_of(picks.begin(), picks.end(), [&](std::size_t p) { return p < n; }));
    }
  }
  CHECK_THROWS_AS(sample_without_replacement(3, 4, rng), Error);
}

TEST_CASE("sample_without_replacement is a partial Fisher-Yates shuffle") {
  // Oracle: shuffle with the same draws, written out longhand.
  Rng a(21), b(21);
  const std::size_t n = 30, k = 12;
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  for (std::size_t i = 0; i < k; ++i) std::swap(perm[i], perm[i + b.below(n - i)]);
  perm.resize(k);
  CHECK(sample_without_replacement(n, k, a) == perm);
}

TEST_CASE("each position is drawn with probability k/n") {
  const std::size_t n = 10, k = 3;
  std::array<int, 10> hits{};
  for (std::uint64_t seed = 0; seed < 20000; ++seed) {
    Rng rng(seed);
    for (auto p : sample_without_replacement(n, k, rng)) ++hits[p];
  }
  for (int h : hits) CHECK(std::abs(h / 20000.0 - 0.3) < 0.015);
}

TEST_CASE("class and group names round-trip") {
  for (ClassId c = 0; c < kNumMappedLabels; ++c) CHECK(class_from_name(class_name(c)) == c);
  CHECK(class_name(0) == "car");
  CHECK(class_name(9) == "bicycle");
  CHECK(class_name(kBackground) == "background");
  CHECK_THROWS_AS(class_from_name("zebra"), Error);
  for (auto g : kAllGroups) CHECK(group_from_name(group_name(g)) == g);
  CHECK(group_from_name("high") == Group::High);
  CHECK(group_from_name("BACKGROUND") == Group::Background);
  CHECK_THROWS_AS(group_from_name("urgent"), Error);
}

TEST_CASE("errors carry their code and name") {
  const Error e(ErrorCode::TargetExceedsBudget, "too many");
  CHECK(e.code() == ErrorCode::TargetExceedsBudget);
  CHECK(std::string(e.what()) == "TargetExceedsBudget: too many");
  CHECK(is_usage_error(ErrorCode::MissingFile));
  CHECK(is_usage_error(ErrorCode::ParseError));
  CHECK_FALSE(is_usage_error(ErrorCode::BudgetMismatch));
  CHECK_FALSE(is_usage_error(ErrorCode::TargetExceedsBudget));
}

TEST_CASE("voxel indices order lexicographically") {
  CHECK(VoxelIndex{0, 0, 1} < VoxelIndex{0, 1, 0});
  CHECK(VoxelIndex{0, 5, 5} < VoxelIndex{1, 0, 0});
  CHECK(to_string(VoxelIndex{1, -2, 3}) == "(1,-2,3)");
}
