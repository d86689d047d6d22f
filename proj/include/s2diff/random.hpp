#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <random>

namespace s2diff {

using Rng = std::mt19937_64;

/// SplitMix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Derives the seed of an independent substream from a parent seed and a
/// path of indices, e.g. (master, step i, candidate q). Parallel and serial
/// consumers that agree on the path draw identical numbers.
constexpr std::uint64_t substream_seed(std::uint64_t parent,
                                       std::initializer_list<std::uint64_t> path) {
  std::uint64_t h = mix64(parent);
  for (const std::uint64_t p : path) h = mix64(h ^ mix64(p + 0x632be59bd9b4e019ULL));
  return h;
}

inline Rng substream(std::uint64_t parent, std::initializer_list<std::uint64_t> path) {
  return Rng(substream_seed(parent, path));
}

/// Standard normal number `index` of the counter-based stream `key`.
/// Stateless, so any subset of entries can be drawn in any order.
inline double counter_normal(std::uint64_t key, std::uint64_t index) {
  constexpr double kTwoPi = 6.283185307179586476925286766559;
  // 53-bit uniforms in (0, 1].
  const double u1 =
      (static_cast<double>(mix64(key ^ mix64(2 * index)) >> 11) + 1.0) * 0x1.0p-53;
  const double u2 = static_cast<double>(mix64(key ^ mix64(2 * index + 1)) >> 11) * 0x1.0p-53;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(kTwoPi * u2);
}

/// Purpose tags that keep substreams of different consumers apart.
namespace stream {
inline constexpr std::uint64_t init_noise = 1;
inline constexpr std::uint64_t candidates = 2;
inline constexpr std::uint64_t initial_states = 3;
inline constexpr std::uint64_t minibatch = 4;
inline constexpr std::uint64_t trajectory = 5;
inline constexpr std::uint64_t violation = 6;
inline constexpr std::uint64_t evaluation = 7;
inline constexpr std::uint64_t network_init = 8;
inline constexpr std::uint64_t epoch = 9;
}  // namespace stream

}  // namespace s2diff
