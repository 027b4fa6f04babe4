#pragma once

#include <cstdint>
#include <random>
#include <span>

namespace purifine {

/// Mixes a base seed with a stream tag so that independent consumers of the
/// same user seed draw from unrelated streams (splitmix64 finalizer).
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream);

/// Seeded pseudo-random source.
///
/// Wraps std::mt19937_64, whose output sequence is fixed by the standard, and
/// implements the derived distributions by hand so results do not depend on
/// the standard library's distribution implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n); n must be positive.
  std::uint64_t index(std::uint64_t n);

  /// Standard normal via Box-Muller; the second variate of each pair is cached.
  double normal();

  bool bernoulli(double p) { return uniform() < p; }

  /// In-place Fisher-Yates shuffle.
  template <typename T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(index(i));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace purifine
