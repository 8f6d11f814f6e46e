#pragma once

#include <cstdint>
#include <limits>

namespace pnp {

/// SplitMix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Counter-based random stream keyed by (seed, stream id).
///
/// Output i of a stream is a pure function of (seed, stream, i), so a slot
/// indexed stream gives the same draws regardless of which worker consumes
/// it. Satisfies UniformRandomBitGenerator.
class RngStream {
public:
  using result_type = std::uint64_t;

  RngStream(std::uint64_t seed, std::uint64_t stream)
      : key_(mix64(seed ^ mix64(stream + 0x632be59bd9b4e019ULL))) {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  result_type operator()() { return mix64(key_ + 0xd1b54a32d192ed03ULL * ++counter_); }

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) { return static_cast<std::uint64_t>(uniform() * static_cast<double>(n)); }

  /// Standard normal deviate (Box-Muller, one value per call).
  double normal();

  std::uint64_t draws() const { return counter_; }

private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

/// Stream ids reserved for session-level draws; slot streams use the slot index.
inline constexpr std::uint64_t kSessionStream = 0xffff'ffff'0000'0001ULL;

/// Seed for step `index` of a sweep derived from the master seed.
constexpr std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index) {
  return mix64(master * 0x2545f4914f6cdd1dULL + index);
}

} // namespace pnp
