#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <span>
#include <utility>

namespace mfsgd {

// std::uniform_*_distribution and std::shuffle are implementation-defined, so every
// draw that feeds a reproducible result goes through these helpers instead.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform01() { return static_cast<double>(engine_() >> 11) * 0x1p-53; }

  /// Unbiased integer in [0, bound). bound must be positive.
  std::uint64_t below(std::uint64_t bound) {
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % bound;
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % bound;
  }

  /// Standard normal deviate (Box-Muller, one value per call).
  double gaussian() {
    double u1;
    do {
      u1 = uniform01();
    } while (u1 <= 0.0);
    const double u2 = uniform01();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

 private:
  std::mt19937_64 engine_;
};

/// Seeded Fisher-Yates over an arbitrary span.
template <typename T>
void fisher_yates(std::span<T> values, Rng& rng) {
  for (std::size_t i = values.size(); i > 1; --i) {
    const std::size_t j = rng.below(i);
    using std::swap;
    swap(values[i - 1], values[j]);
  }
}

/// Deterministic child seed for (seed, epoch, stream). SplitMix64 finalizer.
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t epoch, std::uint64_t stream = 0) {
  std::uint64_t z = seed ^ (epoch * 0x9e3779b97f4a7c15ULL) ^ ((stream + 1) * 0xd1b54a32d192ed03ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace mfsgd
