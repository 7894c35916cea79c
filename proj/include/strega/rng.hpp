#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <utility>

namespace strega {

std::uint64_t splitmix64_next(std::uint64_t& state) noexcept;

/// FNV-1a over the label bytes.
std::uint64_t hash_label(std::string_view label) noexcept;

/// Deterministic xoshiro256** stream seeded through splitmix64.
///
/// Every stochastic operation in the library takes one of these explicitly.
/// `child(label)` derives an independent stream from this stream's seed and
/// the label only, so the number of draws taken from the parent never
/// perturbs the child.
class RngStream {
 public:
  using result_type = std::uint64_t;

  explicit RngStream(std::uint64_t seed = 0) noexcept;

  std::uint64_t seed() const noexcept { return seed_; }
  RngStream child(std::string_view label) const noexcept;
  /// Seed a child stream would get; recorded in manifests so a case can be regenerated.
  std::uint64_t child_seed(std::string_view label) const noexcept;

  std::uint64_t next_u64() noexcept;
  std::uint64_t operator()() noexcept { return next_u64(); }
  static constexpr std::uint64_t min() noexcept { return 0; }
  static constexpr std::uint64_t max() noexcept { return ~std::uint64_t{0}; }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() noexcept;
  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [lo, hi] inclusive, unbiased.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) noexcept;
  bool bernoulli(double p) noexcept { return uniform() < p; }
  /// Standard normal via Box-Muller; the second variate of each pair is cached.
  double normal() noexcept;

  template <typename T>
  void shuffle(std::span<T> items) noexcept {
    for (std::size_t i = items.size(); i > 1; --i) {
      auto j = static_cast<std::size_t>(uniform_int(0, static_cast<std::int64_t>(i - 1)));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::uint64_t seed_;
  std::array<std::uint64_t, 4> s_{};
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace strega
