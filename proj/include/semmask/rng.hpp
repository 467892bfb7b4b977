#pragma once

// Portable random streams. The algorithms are fixed so that every masking
// decision can be reproduced bit-for-bit on another platform or in another
// language:
//
//   seeding      splitmix64 expands a 64-bit seed into the 256-bit state
//   generator    xoshiro256** (Blackman & Vigna)
//   below(n)     Lemire's multiply-shift with rejection (unbiased)
//   uniform()    top 53 bits scaled by 2^-53, in [0, 1)
//   derive_seed  splitmix64(root ^ splitmix64(stream + 0x5EED))
//
// std::uniform_int_distribution is deliberately not used: its output is not
// specified by the standard.

#include <array>
#include <cstdint>
#include <span>
#include <vector>

namespace semmask {

inline std::uint64_t splitmix64(std::uint64_t &state) {
  std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// Independent sub-stream seed for `stream` under `root`.
inline std::uint64_t derive_seed(std::uint64_t root, std::uint64_t stream) {
  std::uint64_t s = stream + 0x5EEDULL;
  std::uint64_t mixed = root ^ splitmix64(s);
  return splitmix64(mixed);
}

class Rng {
 public:
  using result_type = std::uint64_t;

  explicit Rng(std::uint64_t seed) {
    std::uint64_t sm = seed;
    for (auto &word : state_) word = splitmix64(sm);
  }

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return ~result_type{0}; }

  result_type operator()() { return next(); }

  std::uint64_t next() {
    const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n) {
    unsigned __int128 m = static_cast<unsigned __int128>(next()) * n;
    auto low = static_cast<std::uint64_t>(m);
    if (low < n) {
      const std::uint64_t threshold = (0 - n) % n;
      while (low < threshold) {
        m = static_cast<unsigned __int128>(next()) * n;
        low = static_cast<std::uint64_t>(m);
      }
    }
    return static_cast<std::uint64_t>(m >> 64);
  }

  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller (one value per call; the pair's twin is dropped).
  double normal();

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  std::array<std::uint64_t, 4> state_{};
};

/// Chooses k distinct positions out of [0, n) by a partial Fisher-Yates shuffle
/// of the identity permutation. Returned positions are in draw order.
std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k, Rng &rng);

}  // namespace semmask
