#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string_view>
#include <utility>
#include <vector>

namespace tforge {

// Seeded random stream with platform-independent distributions.
//
// std::mt19937_64 output is fixed by the standard, but the std distribution
// classes are not, so every draw used by the toolkit goes through the methods
// below instead.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Unbiased integer in [0, n). n must be positive.
  std::uint64_t uniform_index(std::uint64_t n);

  // Uniform double in [0, 1) with 53 random bits.
  double uniform01();

  bool bernoulli(double p) { return uniform01() < p; }

  // Standard normal via Box-Muller.
  double normal();

  // Index drawn proportionally to the (nonnegative, not all zero) weights.
  std::size_t weighted_index(std::span<const double> weights);

  template <class T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(uniform_index(i));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

std::uint64_t splitmix64(std::uint64_t x);

// Seed for the stream belonging to (stage, index) under a master seed.
// Distinct stages and indices give independent streams, so adding items to a
// run never perturbs the draws of earlier items.
std::uint64_t derive_seed(std::uint64_t master, std::string_view stage,
                          std::uint64_t index = 0);

inline Rng derive_stream(std::uint64_t master, std::string_view stage,
                         std::uint64_t index = 0) {
  return Rng(derive_seed(master, stage, index));
}

}  // namespace tforge
