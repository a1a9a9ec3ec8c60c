#pragma once

// Keyed seed derivation. Every random stream in the library is a pure
// function of (base seed, keys), so results never depend on call order.

#include <cstdint>
#include <initializer_list>

namespace cappa {

/// SplitMix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> keys) noexcept {
  std::uint64_t h = mix64(seed);
  for (auto k : keys) h = mix64(h ^ mix64(k + 0x632be59bd9b4e019ULL));
  return h;
}

/// Uniform double in [0,1) from the top 53 bits of a derived seed.
constexpr double keyed_uniform(std::uint64_t seed, std::initializer_list<std::uint64_t> keys) noexcept {
  return static_cast<double>(derive_seed(seed, keys) >> 11) * 0x1.0p-53;
}

/// Named streams derived from the single user-facing seed.
namespace stream {
inline constexpr std::uint64_t kInit = 1;
inline constexpr std::uint64_t kModeDraw = 2;
inline constexpr std::uint64_t kBatchOrder = 3;
inline constexpr std::uint64_t kReverse = 4;
inline constexpr std::uint64_t kDropout = 5;
inline constexpr std::uint64_t kProbe = 6;
}  // namespace stream

}  // namespace cappa
