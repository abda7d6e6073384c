#include "dera/controls.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dera/error.hpp"
#include "dera/logmath.hpp"

namespace dera {
namespace {

// Nucleus boundary comparisons absorb this much accumulated rounding.
constexpr double kNucleusSlack = 1e-12;

}  // namespace

void validate_controls(const DecodingControls& c, std::size_t vocab_size) {
  if (!(c.temperature > 0.0) || !std::isfinite(c.temperature)) {
    fail(Errc::BadControl, "temperature must be > 0");
  }
  if (c.top_k > vocab_size) fail(Errc::BadControl, "top_k must be in [1, V]");
  if (!(c.top_p > 0.0 && c.top_p <= 1.0)) fail(Errc::BadControl, "top_p must be in (0, 1]");
}

LogitVector apply_decoding_controls(const LogitVector& h, const DecodingControls& c) {
  validate_controls(c, h.size());
  if (h.support_size() == 0) fail(Errc::EmptySupport, "decoding controls on an all-masked vector");

  std::vector<double> v(h.values().begin(), h.values().end());
  if (c.temperature != 1.0) {
    for (double& x : v) {
      if (!is_masked(x)) x /= c.temperature;
    }
  }

  const bool use_k = c.top_k != 0 && c.top_k < v.size();
  const bool use_p = c.top_p < 1.0;
  if (!use_k && !use_p) return LogitVector(std::move(v));

  // Unmasked tokens in descending score order, lower index first on ties.
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!is_masked(v[i])) order.push_back(i);
  }
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return v[a] > v[b]; });

  std::size_t keep = order.size();
  if (use_k) keep = std::min(keep, c.top_k);

  if (use_p) {
    std::vector<double> kept(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep));
    for (std::size_t j = 0; j < keep; ++j) kept[j] = v[order[j]];
    const double lse = logsumexp(kept);
    double cum = 0.0;
    std::size_t nucleus = 0;
    while (nucleus < keep) {
      cum += std::exp(kept[nucleus] - lse);
      ++nucleus;
      if (cum + kNucleusSlack >= c.top_p) break;
    }
    keep = nucleus;
  }

  std::vector<double> out(v.size(), kMasked);
  for (std::size_t j = 0; j < keep; ++j) out[order[j]] = v[order[j]];
  return LogitVector(std::move(out));
}

}  // namespace dera
