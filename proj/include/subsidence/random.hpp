#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace subsidence {

/// splitmix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

/// Counter-based stream derivation: the seed of a sub-stream depends only on
/// the root seed and the counters, never on the order streams are consumed.
constexpr std::uint64_t derive_seed(std::uint64_t root, std::initializer_list<std::uint64_t> counters) noexcept {
  std::uint64_t h = mix64(root);
  for (auto c : counters) h = mix64(h ^ mix64(c + 0x632be59bd9b4e019ull));
  return h;
}

using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t root, std::initializer_list<std::uint64_t> counters) {
  return Rng(derive_seed(root, counters));
}

}  // namespace subsidence
