#pragma once

#include <cmath>
#include <cstdint>

#include "glam/common.hpp"

namespace glam {

// splitmix64: 64-bit state, bit-reproducible across platforms. All weight
// init, data generation and augmentation draw from this, never from
// std:: distributions (whose outputs are implementation-defined).
struct Rng {
  u64 state;

  explicit Rng(u64 seed) : state(seed) {}

  u64 next_u64() {
    u64 z = (state += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1), 53-bit resolution.
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  // Box-Muller, two fresh draws per call (no cached spare, keeps streams
  // splittable).
  double normal() {
    double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;  // (0, 1]
    double u2 = next_double();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

  // Normal(0, stddev) resampled until within 2 stddev.
  double trunc_normal(double stddev) {
    for (;;) {
      double x = normal();
      if (std::fabs(x) <= 2.0) return x * stddev;
    }
  }

  // Uniform integer in [0, n). Modulo bias is irrelevant at our scales.
  u64 below(u64 n) { return next_u64() % n; }

  int range_int(int lo, int hi) {  // inclusive bounds
    return lo + static_cast<int>(below(static_cast<u64>(hi - lo + 1)));
  }

  bool coin() { return (next_u64() & 1ull) != 0; }

  // Child stream decorrelated from this one; advancing the child does not
  // advance the parent beyond the single draw made here.
  Rng split(u64 salt) { return Rng(next_u64() ^ (salt * 0x9E3779B97F4A7C15ull)); }

  template <typename It>
  void shuffle(It first, It last) {
    i64 n = last - first;
    for (i64 i = n - 1; i > 0; --i) {
      i64 j = static_cast<i64>(below(static_cast<u64>(i + 1)));
      std::swap(first[i], first[j]);
    }
  }
};

// Deterministic per-sample seed derivation, usable in parallel generation.
inline u64 mix_seed(u64 seed, u64 index) {
  u64 z = seed + 0x9E3779B97F4A7C15ull * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

}  // namespace glam
