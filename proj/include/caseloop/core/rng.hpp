#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <utility>
#include <vector>

#include "caseloop/core/hash.hpp"

namespace caseloop {

// xoshiro256** with our own distribution mapping, so sequences are identical
// across standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  // Independent stream keyed by (seed, tag).
  static Rng derive(std::uint64_t seed, std::string_view tag);
  static Rng derive(std::uint64_t seed, std::string_view tag, std::uint64_t index);

  std::uint64_t next_u64();
  // Uniform in [0, n); n must be > 0.
  std::uint64_t uniform_int(std::uint64_t n);
  // Uniform in [lo, hi].
  int uniform_range(int lo, int hi);
  // Uniform in [0, 1).
  double uniform01();
  double normal();
  bool bernoulli(double p) { return uniform01() < p; }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(uniform_int(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  template <typename T>
  const T& pick(std::span<const T> items) {
    return items[static_cast<std::size_t>(uniform_int(items.size()))];
  }
  template <typename T>
  const T& pick(const std::vector<T>& items) {
    return pick(std::span<const T>(items));
  }

  // Index drawn proportionally to non-negative weights.
  std::size_t weighted_index(std::span<const double> weights);

 private:
  std::uint64_t s_[4];
};

}  // namespace caseloop
