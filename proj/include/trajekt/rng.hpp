#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

#include "trajekt/common.hpp"

namespace trajekt {

inline uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// xoshiro256++ with hand-rolled samplers so streams are bit-reproducible
// across platforms (std:: distributions are implementation-defined).
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) {
    uint64_t sm = seed;
    for (auto& w : s_) w = splitmix64(sm);
  }

  uint64_t next() {
    const uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
    const uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // uniform on [0, 1)
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  // uniform integer in [0, n)
  uint64_t uniform_int(uint64_t n) {
    // rejection keeps the draw unbiased
    uint64_t threshold = (0 - n) % n;
    for (;;) {
      uint64_t r = next();
      if (r >= threshold) return r % n;
    }
  }

  double normal(double mean = 0.0, double sd = 1.0) {
    if (have_spare_) {
      have_spare_ = false;
      return mean + sd * spare_;
    }
    double u, v, s;
    do {
      u = 2.0 * uniform() - 1.0;
      v = 2.0 * uniform() - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    double m = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * m;
    have_spare_ = true;
    return mean + sd * u * m;
  }

  double exponential(double rate) {
    double u;
    do {
      u = uniform();
    } while (u == 0.0);
    return -std::log(u) / rate;
  }

  // Knuth for small means; normal approximation above 50 is plenty here
  int poisson(double mean) {
    if (mean <= 0.0) return 0;
    if (mean > 50.0) {
      int k = static_cast<int>(std::lround(normal(mean, std::sqrt(mean))));
      return k < 0 ? 0 : k;
    }
    double limit = std::exp(-mean), prod = uniform();
    int k = 0;
    while (prod > limit) {
      prod *= uniform();
      ++k;
    }
    return k;
  }

 private:
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
  uint64_t s_[4];
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// Named substream derivation: every stage / worker draws from its own stream
// so stages rerun independently yet deterministically.
inline uint64_t derive_seed(uint64_t master, std::string_view name) {
  uint64_t st = master ^ fnv1a(name);
  return splitmix64(st);
}

inline uint64_t derive_seed(uint64_t master, std::string_view name, uint64_t index) {
  uint64_t st = master ^ fnv1a(name) ^ (0x9E3779B97F4A7C15ULL * (index + 1));
  return splitmix64(st);
}

}  // namespace trajekt
