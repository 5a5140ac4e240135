#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

#include "effmod/tensor.hpp"

namespace effmod {

/// SplitMix64 finalizer; used to derive independent stream seeds from keys.
constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t mix_key(std::uint64_t a, std::uint64_t b) { return mix64(a ^ mix64(b)); }

/// Deterministic generator. Distributions are computed here rather than with
/// <random> distribution classes so streams are identical across standard
/// library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(mix64(seed)) {}

  std::uint64_t next() { return engine_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) { return n == 0 ? 0 : engine_() % n; }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * std::numbers::pi * u2);
    has_spare_ = true;
    return r * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Normal(0, std) resampled until within +-2 std.
  double trunc_normal(double std) {
    for (;;) {
      const double z = normal();
      if (std::abs(z) <= 2.0) return z * std;
    }
  }

  template <class T>
  void fill_uniform(Tensor<T>& t, double lo, double hi) {
    for (auto& v : t.vec()) v = static_cast<T>(uniform(lo, hi));
  }

  template <class T>
  void fill_normal(Tensor<T>& t, double std = 1.0) {
    for (auto& v : t.vec()) v = static_cast<T>(normal() * std);
  }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

template <class T>
Tensor<T> random_tensor(Shape s, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t(s);
  Rng rng(seed);
  rng.fill_uniform(t, lo, hi);
  return t;
}

}  // namespace effmod
