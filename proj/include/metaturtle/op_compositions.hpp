#pragma once

#include <cstdint>

#include "metaturtle/fd_check.hpp"

namespace metaturtle {

// Input length expected by random_composition().
inline constexpr std::size_t kCompositionInputs = 6;

// A scalar function of a length-6 vector that uses every differentiable op of
// the library at least once, with seed-dependent constants and a
// seed-dependent chain of extra elementwise ops.
ScalarFunction random_composition(std::uint64_t seed);

// Point in [-1, 1]^n drawn from the seed.
Tensor random_point(std::uint64_t seed, std::size_t n);

}  // namespace metaturtle
