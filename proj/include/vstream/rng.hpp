#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace vstream {

// Counter-based generator. Draw n of stream (key) is
//
//   mix(key + (n + 1) * 0x9E3779B97F4A7C15)
//
// where mix is the SplitMix64 finalizer
//
//   z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//   z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//   z =  z ^ (z >> 31)
//
// so any draw can be recomputed from (key, n) alone. Keys for sub-streams
// are derived with derive_key.
class CounterRng {
 public:
  static constexpr std::uint64_t kGamma = 0x9E3779B97F4A7C15ULL;

  explicit CounterRng(std::uint64_t key, std::uint64_t counter = 0) : key_(key), counter_(counter) {}

  static constexpr std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  static constexpr std::uint64_t at(std::uint64_t key, std::uint64_t n) { return mix(key + (n + 1) * kGamma); }

  static constexpr std::uint64_t derive_key(std::uint64_t key, std::uint64_t stream) {
    return mix(key ^ mix(stream + kGamma));
  }

  std::uint64_t next_u64() { return at(key_, counter_++); }

  // Uniform in [0, 1) with 53 random bits.
  double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in [lo, hi]; modulo bias is below 2^-40 for the ranges used here.
  std::uint64_t next_in(std::uint64_t lo, std::uint64_t hi) { return lo + next_u64() % (hi - lo + 1); }

  // Standard normal via Box-Muller; consumes two draws, returns one value.
  double next_gaussian() {
    double u1 = 1.0 - next_unit();  // (0, 1]
    double u2 = next_unit();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  std::uint64_t counter() const { return counter_; }
  std::uint64_t key() const { return key_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_;
};

}  // namespace vstream
