#pragma once

// Portable random stream. The engine is std::mt19937_64, whose output
// sequence is fixed by the C++ standard; uniforms are built from the top 53
// bits rather than std::uniform_real_distribution (implementation-defined).

#include <cstdint>
#include <random>

#include "dera/types.hpp"

namespace dera {

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  bool coin() { return (engine_() >> 63) != 0; }
  std::uint64_t next_u64() { return engine_(); }
  // Uniform integer in [0, n); n > 0. Rejection sampling, no modulo bias.
  std::uint64_t below(std::uint64_t n);

 private:
  std::mt19937_64 engine_;
};

// Independent sub-stream seed for (master, index), via splitmix64.
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index) noexcept;

// Draws exactly one uniform. Returns i with probability p[i]; zero-mass
// entries are never returned.
TokenId sample_categorical(const NextTokenDistribution& p, Rng& rng);

}  // namespace dera
