#pragma once

#include <array>
#include <cmath>
#include <cstdint>

namespace tasl::detail {

inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c = 0) {
  std::uint64_t s = a * 0x9e3779b97f4a7c15ULL ^ (b + 0x632be59bd9b4e019ULL) ^ (c << 17);
  splitmix64(s);
  return splitmix64(s);
}

/// xoshiro256** per-pixel stream generator.
class FastRng {
 public:
  explicit FastRng(std::uint64_t seed) {
    for (auto& s : s_) s = splitmix64(seed);
  }

  std::uint64_t next() {
    const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
  std::array<std::uint64_t, 4> s_{};
};

/// Standard-normal quantiles at (i + 0.5) / 4096; indexing with uniform
/// 12-bit draws samples a discretized N(0, 1).
class NormalTable {
 public:
  static const NormalTable& instance() {
    static const NormalTable table;
    return table;
  }
  double operator[](std::uint64_t i) const { return q_[i & 4095]; }

 private:
  NormalTable() {
    for (int i = 0; i < 4096; ++i) {
      const double p = (i + 0.5) / 4096.0;
      double lo = -10.0, hi = 10.0;
      for (int it = 0; it < 100; ++it) {
        const double mid = 0.5 * (lo + hi);
        const double cdf = 0.5 * std::erfc(-mid / std::sqrt(2.0));
        (cdf < p ? lo : hi) = mid;
      }
      q_[i] = 0.5 * (lo + hi);
    }
  }
  std::array<double, 4096> q_{};
};

/// Draws five discretized normals per 64-bit word.
class NormalStream {
 public:
  explicit NormalStream(std::uint64_t seed) : rng_(seed), table_(NormalTable::instance()) {}
  double next() {
    if (left_ == 0) {
      word_ = rng_.next();
      left_ = 5;
    }
    const double v = table_[word_];
    word_ >>= 12;
    --left_;
    return v;
  }

 private:
  FastRng rng_;
  const NormalTable& table_;
  std::uint64_t word_ = 0;
  int left_ = 0;
};

}  // namespace tasl::detail
