#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace g2kit {

/// Seeded random source for the simulators.
///
/// mt19937_64 has a standard-specified sequence, and the variate
/// transformations below are written out explicitly instead of using
/// std::*_distribution (whose algorithms are implementation-defined).
/// Identical seeds therefore produce identical streams on every
/// platform/compiler.
class SplitRng {
 public:
  explicit SplitRng(std::uint64_t seed) : eng_(seed) {}

  /// splitmix64 scramble, used to derive independent sub-stream seeds.
  static std::uint64_t mix(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::uint64_t raw() { return eng_(); }

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  /// Exponential waiting time with the given rate (inverse-CDF sampling).
  double exponential(double rate) { return -std::log1p(-uniform()) / rate; }

  bool bernoulli(double p) { return uniform() < p; }

 private:
  std::mt19937_64 eng_;
};

}  // namespace g2kit
