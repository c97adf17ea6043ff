#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace lsgan::rng {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Counter-based seed splitting: a stream is identified by the root seed and a
// path of integer tags (stage, chain, epoch, ...). Streams never share state,
// so any stream can be recreated on resume without saving engine state.
inline std::uint64_t derive(std::uint64_t seed, std::initializer_list<std::uint64_t> tags) {
  std::uint64_t h = splitmix64(seed);
  for (auto t : tags) h = splitmix64(h ^ splitmix64(t + 0x632be59bd9b4e019ULL));
  return h;
}

using Engine = std::mt19937_64;

inline Engine stream(std::uint64_t seed, std::initializer_list<std::uint64_t> tags) {
  return Engine(derive(seed, tags));
}

// Fresh distribution per draw: libstdc++ caches the second Box-Muller value
// inside the distribution object, which would make the draw sequence depend on
// object lifetime rather than on engine state alone.
inline double normal(Engine& eng) { return std::normal_distribution<double>{}(eng); }

inline double uniform01(Engine& eng) {
  return std::uniform_real_distribution<double>{0.0, 1.0}(eng);
}

// Stage tags used across the pipeline.
enum Stage : std::uint64_t {
  split_stage = 1,
  unlabel_stage = 2,
  init_stage = 3,
  generator_stage = 4,
  critic_stage = 5,
  noise_stage = 6,
  subsample_stage = 7,
  labeled_perm_stage = 8,
};

}  // namespace lsgan::rng
