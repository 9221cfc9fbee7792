#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <utility>

namespace tsae {

/// xoshiro256** generator, state seeded from a 64-bit value through
/// splitmix64. All derived draws (uniform, normal, bounded ints) are computed
/// here rather than through <random> distributions, whose output is
/// implementation-defined, so streams match across platforms.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);

  std::uint64_t next_u64();
  /// Uniform double in [0, 1) with 53 random bits.
  double uniform();
  /// Uniform integer in [0, bound); bound must be positive.
  std::uint64_t below(std::uint64_t bound);
  /// Standard normal draw (Box-Muller, one value per call).
  double normal();

  /// Independent child stream; the parent advances by one draw.
  Rng fork();

  template <typename T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

  const std::array<std::uint64_t, 4>& state() const noexcept { return s_; }

 private:
  std::array<std::uint64_t, 4> s_{};
};

/// One splitmix64 step; advances `x`.
std::uint64_t splitmix64(std::uint64_t& x);

}  // namespace tsae
