#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace flowgrpo {

using Rng = std::mt19937_64;

// SplitMix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

// Derives an independent stream seed from a root seed and a path of
// indices, e.g. (seed, iteration, prompt, member). The result does not
// depend on scheduling, so parallel rollouts stay reproducible.
inline std::uint64_t stream_seed(std::uint64_t root,
                                 std::initializer_list<std::uint64_t> path) {
  std::uint64_t h = mix64(root);
  for (auto p : path) h = mix64(h ^ mix64(p + 0x632BE59BD9B4E019ULL));
  return h;
}

inline Rng make_stream(std::uint64_t root,
                       std::initializer_list<std::uint64_t> path) {
  return Rng(stream_seed(root, path));
}

inline std::vector<double> standard_normal(std::size_t dim, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> out(dim);
  for (auto& v : out) v = normal(rng);
  return out;
}

}  // namespace flowgrpo
