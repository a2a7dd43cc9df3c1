#pragma once

#include <cstdint>
#include <limits>

namespace ltds {

/// Counter-based generator built on the SplitMix64 finalizer.
///
/// Output i of a stream with key k is mix64(k + i·0x9E3779B97F4A7C15), where mix64 is
/// the SplitMix64 finalizer (shifts 30/27/31, multipliers 0xBF58476D1CE4E5B9 and
/// 0x94D049BB133111EB). The full state is (key, counter), so streams can be saved,
/// restored and split without touching other streams.
class Rng {
 public:
  using result_type = std::uint64_t;

  explicit Rng(std::uint64_t seed = 0);
  Rng(std::uint64_t key, std::uint64_t counter) : key_(key), counter_(counter) {}

  std::uint64_t next_u64();
  result_type operator()() { return next_u64(); }
  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Standard normal via Box-Muller; consumes two outputs.
  double normal();
  /// Uniform integer in [0, n). n must be > 0.
  std::uint64_t index(std::uint64_t n);

  /// Independent child stream; the parent is not advanced.
  Rng split(std::uint64_t stream_id) const;

  std::uint64_t key() const noexcept { return key_; }
  std::uint64_t counter() const noexcept { return counter_; }

  friend bool operator==(const Rng&, const Rng&) = default;

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

std::uint64_t mix64(std::uint64_t z);

}  // namespace ltds
