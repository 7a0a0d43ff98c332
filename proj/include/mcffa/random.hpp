#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace mcffa {

using Rng = std::mt19937_64;

// Derives an independent stream seed from (seed, purpose, index...) so that
// every consumer of randomness can be reproduced in isolation.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view purpose, std::uint64_t a = 0,
                          std::uint64_t b = 0);

inline Rng make_rng(std::uint64_t seed, std::string_view purpose, std::uint64_t a = 0, std::uint64_t b = 0) {
  return Rng(derive_seed(seed, purpose, a, b));
}

}  // namespace mcffa
