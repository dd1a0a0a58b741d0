#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <unordered_set>
#include <vector>

// Self-contained PRNG utilities. The standard <random> distributions are
// implementation-defined, which would break bit-exact reproducibility across
// toolchains, so every draw used by the library goes through this file.

namespace uvdef {

inline uint64_t splitmix64_next(uint64_t& state) {
  uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Order-sensitive combiner for deriving stream seeds from (seed, tag, ...).
inline uint64_t mix_seed(uint64_t a, uint64_t b) {
  a ^= b + 0x9e3779b97f4a7c15ULL + (a << 12) + (a >> 4);
  return splitmix64_next(a);
}

template <class... Rest>
uint64_t mix_seed(uint64_t a, uint64_t b, uint64_t c, Rest... rest) {
  return mix_seed(mix_seed(a, b), c, rest...);
}

// xoshiro256** with splitmix64 seeding.
class Rng {
 public:
  explicit Rng(uint64_t seed) {
    uint64_t s = seed;
    for (auto& w : state_) w = splitmix64_next(s);
  }

  uint64_t next() {
    const uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // Uniform in [0,1) with 53 random bits.
  double uniform01() { return double(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // Unbiased draw in [0,n) by rejection.
  uint64_t bounded(uint64_t n) {
    if (n == 0) throw std::invalid_argument("Rng::bounded: n must be positive");
    const uint64_t threshold = (0 - n) % n;
    for (;;) {
      const uint64_t r = next();
      if (r >= threshold) return r % n;
    }
  }

  // Standard normal via Box-Muller; the paired deviate is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform01();
    while (u1 <= 0.0) u1 = uniform01();
    const double u2 = uniform01();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

 private:
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  uint64_t state_[4] = {};
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// Fisher-Yates in-place shuffle.
template <class T>
void shuffle(std::vector<T>& v, Rng& rng) {
  for (size_t i = v.size(); i > 1; --i) {
    const size_t j = size_t(rng.bounded(i));
    std::swap(v[i - 1], v[j]);
  }
}

// k distinct values from [0,n), ascending. Floyd's algorithm: O(k) draws,
// no O(n) scratch, so it stays cheap when n is the full fault-site space.
inline std::vector<uint64_t> sample_k_of_n(Rng& rng, uint64_t n, uint64_t k) {
  if (k > n) throw std::invalid_argument("sample_k_of_n: k exceeds n");
  std::vector<uint64_t> out;
  out.reserve(size_t(k));
  std::unordered_set<uint64_t> seen;
  seen.reserve(size_t(k) * 2);
  for (uint64_t j = n - k; j < n; ++j) {
    const uint64_t t = rng.bounded(j + 1);
    const uint64_t pick = seen.count(t) ? j : t;
    seen.insert(pick);
    out.push_back(pick);
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace uvdef
