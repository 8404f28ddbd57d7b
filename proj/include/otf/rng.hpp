#pragma once

#include "otf/common.hpp"

#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

namespace otf {

// Counter-based random number generation. A stream is an immutable 64-bit
// key; substreams are derived by folding labels (step index, particle index,
// role) into the key, and individual draws are indexed by a counter. Every
// draw is a pure function of (key, counter), so evaluation order and
// parallel scheduling cannot change results.

inline constexpr std::uint64_t mix64(std::uint64_t x) {
  // splitmix64 finalizer
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

//Labeled substream roles, folded into stream keys.
enum class Role : std::uint64_t {
  Init = 1,          // initial-ensemble sampling
  ProcessNoise = 2,  // dynamics noise during forecast
  ObsNoise = 3,      // observation noise on the truth trajectory
  ObsSim = 4,        // per-particle simulated observations
  Shuffle = 5,       // reference-shuffle permutations
  Resample = 6,      // multinomial/systematic resampling
  RefObs = 7,        // simulated observations of the shuffled reference
  PairSample = 8,    // regularizer pair subsampling
  ParamInit = 9,     // network weight initialization
  Misc = 10,
};

class RngStream {
 public:
  explicit RngStream(std::uint64_t seed) : key_(mix64(seed ^ 0x5bf03635ff573a1bULL)) {}

  RngStream fold(std::uint64_t label) const {
    RngStream s = *this;
    s.key_ = mix64(key_ ^ mix64(label + 0x8f1bbcdcbfa53e0bULL));
    return s;
  }
  RngStream fold(Role r) const { return fold(static_cast<std::uint64_t>(r) * 0xda942042e4dd58b5ULL); }

  std::uint64_t bits(std::uint64_t ctr) const { return mix64(key_ ^ mix64(ctr * 0xd6e8feb86659fd93ULL + 1)); }

  // Uniform on (0, 1): never returns exactly 0 or 1.
  double uniform(std::uint64_t ctr) const {
    return (static_cast<double>(bits(ctr) >> 11) + 0.5) * 0x1.0p-53;
  }

  // Standard normal via Box-Muller; consumes counters (2*ctr, 2*ctr + 1).
  double normal(std::uint64_t ctr) const {
    const double u1 = uniform(2 * ctr);
    const double u2 = uniform(2 * ctr + 1);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  Vec normal_vec(int n, std::uint64_t ctr_base = 0) const {
    Vec z(n);
    for (int i = 0; i < n; ++i) z[i] = normal(ctr_base + static_cast<std::uint64_t>(i));
    return z;
  }

  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t ctr, std::uint64_t n) const {
    const double u = uniform(ctr);
    auto k = static_cast<std::uint64_t>(u * static_cast<double>(n));
    return k >= n ? n - 1 : k;
  }

  // Fisher-Yates permutation of {0, ..., n-1}.
  std::vector<int> permutation(int n) const {
    std::vector<int> p(static_cast<std::size_t>(n));
    std::iota(p.begin(), p.end(), 0);
    for (int i = n - 1; i > 0; --i) {
      const auto j = static_cast<int>(below(static_cast<std::uint64_t>(i), static_cast<std::uint64_t>(i) + 1));
      std::swap(p[static_cast<std::size_t>(i)], p[static_cast<std::size_t>(j)]);
    }
    return p;
  }

  std::uint64_t key() const { return key_; }

 private:
  std::uint64_t key_;
};

}  // namespace otf
