#pragma once

// Portable seeded randomness.
//
// Streams are std::mt19937_64 (its output sequence is fixed by the C++
// standard). Doubles are formed from the top 53 bits, not through
// std::uniform_real_distribution, whose algorithm is implementation-defined.
//
// Seed splitting: derive_seed(master, label, index) folds the master seed,
// the FNV-1a hash of `label` and `index` through SplitMix64 finalisers. Any
// (master, label, index) triple names one independent stream.

#include <cstdint>
#include <random>
#include <string_view>

namespace metaturtle {

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a64(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

constexpr std::uint64_t derive_seed(std::uint64_t master, std::string_view label,
                                    std::uint64_t index) {
  return splitmix64(splitmix64(splitmix64(master) ^ fnv1a64(label)) ^ index);
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  // Uniform on [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  // Uniform on [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

 private:
  std::mt19937_64 engine_;
};

}  // namespace metaturtle
