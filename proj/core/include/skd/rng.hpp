#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

namespace skd {

/// 64-bit FNV-1a. Used for artifact checksums, cache keys, and seed derivation.
inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline uint64_t fnv1a64(std::string_view s, uint64_t h = 0xcbf29ce484222325ULL) {
  return fnv1a64(s.data(), s.size(), h);
}

/// Deterministic RNG (xoshiro256** seeded via splitmix64). All randomness in
/// the project flows through this class so artifacts are reproducible across
/// platforms; std::random distributions are never used because their output
/// is not pinned by the standard.
class Rng {
 public:
  explicit Rng(uint64_t seed) : root_seed_(seed) {
    uint64_t x = seed;
    for (auto& w : s_) w = splitmix64(x);
  }

  /// Independent child stream identified by a label, e.g. one per tensor or
  /// per utterance. Depends only on (root seed, label), not on draw order.
  Rng child(std::string_view label) const { return Rng(root_seed_ ^ fnv1a64(label)); }
  Rng child(uint64_t tag) const { return Rng(root_seed_ ^ fnv1a64(&tag, sizeof(tag))); }

  uint64_t next_u64() {
    const uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  /// Uniform double in [0, 1) with 53 random bits.
  double next_double() { return (next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  /// Uniform integer in [0, n). Rejection sampling keeps it exactly unbiased.
  uint64_t below(uint64_t n) {
    if (n == 0) return 0;
    const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  /// Standard normal via Box-Muller (no cached spare, keeps the stream
  /// position a pure function of draw count).
  double gaussian() {
    double u1;
    do {
      u1 = next_double();
    } while (u1 <= 0.0);
    const double u2 = next_double();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      const size_t j = static_cast<size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  static uint64_t splitmix64(uint64_t& x) {
    uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  uint64_t s_[4];
  uint64_t root_seed_;
};

/// Combine a base seed with stage/iteration labels into a derived seed.
inline uint64_t derive_seed(uint64_t base, std::string_view label, uint64_t index = 0) {
  uint64_t h = fnv1a64(label, 0xcbf29ce484222325ULL ^ base);
  h = fnv1a64(&index, sizeof(index), h);
  return h;
}

}  // namespace skd
