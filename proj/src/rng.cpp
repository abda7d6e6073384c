#include "dera/rng.hpp"

#include "dera/error.hpp"

namespace dera {

std::uint64_t Rng::below(std::uint64_t n) {
  if (n == 0) fail(Errc::InvalidArgument, "Rng::below(0)");
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  for (;;) {
    const std::uint64_t x = engine_();
    if (x < limit) return x % n;
  }
}

std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index) noexcept {
  std::uint64_t z = master ^ (0x9E3779B97F4A7C15ull * (index + 1));
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

TokenId sample_categorical(const NextTokenDistribution& p, Rng& rng) {
  const double u = rng.uniform();
  double cum = 0.0;
  TokenId last_positive = -1;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] <= 0.0) continue;
    last_positive = static_cast<TokenId>(i);
    cum += p[i];
    if (u < cum) return last_positive;
  }
  // u fell in the rounding gap above the accumulated total.
  if (last_positive < 0) fail(Errc::EmptySupport, "categorical with no mass");
  return last_positive;
}

}  // namespace dera
