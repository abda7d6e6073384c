#include "dera/verify.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "dera/fixtures.hpp"
#include "dera/logmath.hpp"

namespace dera {
namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double max_logprob_gap(const SequenceDistribution& a, const SequenceDistribution& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double x = a.logprob(i), y = b.logprob(i);
    if (is_masked(x) || is_masked(y)) {
      if (is_masked(x) != is_masked(y)) return kInf;
      continue;
    }
    worst = std::max(worst, std::abs(x - y));
  }
  return worst;
}

// Every prefix of a response in the support that still has a next token to
// draw.
std::vector<std::vector<TokenId>> open_prefixes(const SequenceDistribution& d) {
  std::vector<std::vector<TokenId>> out;
  for (const Sequence& y : d.support()) {
    const auto t = y.tokens();
    const std::size_t n = std::min(t.size(), d.max_len());
    for (std::size_t k = 0; k < n; ++k) out.emplace_back(t.begin(), t.begin() + static_cast<std::ptrdiff_t>(k));
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

PropertyCheck check(std::string name, double deviation, double tolerance) {
  return {std::move(name), deviation, tolerance, deviation <= tolerance};
}

}  // namespace

std::vector<PropertyCheck> verify_instance(const VerifyInstance& inst, const VerifyOptions& options) {
  double residual = 0.0, identity = 0.0, token = 0.0, reward_drop = 0.0, kl_drop = 0.0, gap = 0.0;
  std::vector<double> path{0.0};
  for (double l : options.lambdas) {
    if (l > 0.0) path.push_back(l);
  }
  std::sort(path.begin(), path.end());

  for (QueryId q : inst.queries) {
    const SequenceDistribution ref = enumerate_dist(inst.ref, q);
    const SequenceDistribution al = enumerate_dist(inst.aligned, q);
    residual = std::max(residual, scaled_reward_residual(ref, al, inst.reward, inst.beta));

    double prev_r = -kInf, prev_kl = -kInf;
    for (double lambda : path) {
      const SequenceDistribution exact = realigned_exact(ref, al, lambda);
      if (lambda > 0.0) {
        identity = std::max(identity, max_logprob_gap(exact, align_exact(ref, inst.reward, inst.beta / lambda)));
      }
      const double r = expected_reward(exact, inst.reward);
      const double kl = sequence_kl(exact, ref);
      reward_drop = std::max(reward_drop, prev_r - r);
      kl_drop = std::max(kl_drop, prev_kl - kl);
      prev_r = r;
      prev_kl = kl;

      for (const auto& prefix : open_prefixes(ref)) {
        const LogitVector& hr = inst.ref.logits(q, prefix);
        const LogitVector& ha = inst.aligned.logits(q, prefix);
        const NextTokenDistribution mix = softmax(blend_logits(hr, ha, lambda));
        const NextTokenDistribution geo = blend_geometric(softmax(hr), softmax(ha), lambda);
        token = std::max(token, total_variation(mix.probs(), geo.probs()));
      }
    }

    for (double lambda : {0.0, 1.0}) {
      RealignConfig cfg;
      cfg.beta = inst.beta;
      cfg.lambda = lambda;
      const SequenceDistribution dera = dera_sequence_dist(inst.ref, inst.aligned, cfg, q);
      gap = std::max(gap, sequence_kl(realigned_exact(ref, al, lambda), dera));
    }
  }

  return {check("scaled_reward_residual", residual, options.identity_tolerance),
          check("realignment_identity", identity, options.identity_tolerance),
          check("token_geometric_mixture", token, options.token_tolerance),
          check("monotone_reward", reward_drop, options.identity_tolerance),
          check("monotone_kl", kl_drop, options.identity_tolerance),
          check("endpoint_gap", gap, options.token_tolerance)};
}

VerifyInstance random_verify_instance(std::uint64_t seed) {
  RandomInstance r = random_instance(seed);
  const SequenceDistribution ref = enumerate_dist(r.ref, 0);
  TabularLM aligned = conditionals_of(align_exact(ref, r.reward, r.beta));
  return {std::move(r.ref), std::move(aligned), std::move(r.reward), r.beta, {0}};
}

}  // namespace dera
