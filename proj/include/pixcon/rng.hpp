#pragma once

#include <cstdint>
#include <initializer_list>
#include <span>
#include <string_view>
#include <vector>

namespace pixcon {

/// Mixes a seed with a list of tags into a new 64-bit seed (splitmix64 chain).
/// Used to give every (step, sample, purpose) its own independent stream.
std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> tags);

/// Hashes a string into a 64-bit tag (FNV-1a).
std::uint64_t hash_tag(std::string_view text);

/// xoshiro256** generator. Integer output is bit-identical on every platform;
/// real-valued draws are derived from the integer stream by fixed arithmetic.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi);
  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n);
  bool bernoulli(double p);
  /// Standard normal via Box-Muller (no cached second value).
  double normal();

  template <typename T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

  /// Draws k distinct indices from [0, n) (partial Fisher-Yates), in draw order.
  std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k);

 private:
  std::uint64_t seed_;
  std::uint64_t s_[4];
};

}  // namespace pixcon
