#pragma once

// Decoding-time realignment: per-token geometric mixtures of a reference and
// one or more aligned models, written as linear interpolation of logits.
//
// Blends follow one masking rule: the output token is masked iff some input
// with a nonzero coefficient masks it. A zero coefficient never propagates a
// mask (0 * -inf := 0), so lambda = 0 reproduces the reference exactly.

#include <cstdint>
#include <span>
#include <variant>
#include <vector>

#include "dera/controls.hpp"
#include "dera/types.hpp"

namespace dera {

struct RealignConfig {
  // Training-time KL strength of the aligned model(s).
  double beta = 0.1;
  // Single reward: lambda >= 0. Multiple rewards: one weight per aligned model.
  std::variant<double, std::vector<double>> lambda = 1.0;
  DecodingControls controls;
  std::uint64_t seed = 0;
  std::size_t max_len = 64;

  bool multi_reward() const noexcept { return std::holds_alternative<std::vector<double>>(lambda); }
  std::size_t num_aligned() const noexcept;
  // beta / lambda for a single reward (+inf at lambda = 0).
  double effective_strength() const;

  // Throws BadBeta, BadLambda, BadControl (needs V for top_k). Warns once per
  // call when a weight exceeds 10.
  void validate(std::size_t vocab_size) const;
};

void validate_lambda(double lambda);

struct BlendInput {
  LogitVector ref;
  std::vector<LogitVector> aligned;
};

// lambda * aligned + (1 - lambda) * ref. EmptySupport if nothing survives.
LogitVector blend_logits(const LogitVector& ref, const LogitVector& aligned, double lambda);

// (1 - sum(lambdas)) * ref + sum_i lambdas[i] * aligned[i]. With one aligned
// model this is bit-identical to blend_logits.
LogitVector blend_multi(const LogitVector& ref, std::span<const LogitVector> aligned,
                        std::span<const double> lambdas);

// Dispatches on cfg.lambda; a reference-only input (no aligned vectors)
// returns the reference.
LogitVector blend(const BlendInput& input, const RealignConfig& cfg);

// ref * (aligned / ref)^lambda / Z computed on probabilities. Independent of
// the logit route; the two agree to rounding.
// Throws SupportMismatch where ref is 0 but aligned is not (lambda > 0).
NextTokenDistribution blend_geometric(const NextTokenDistribution& ref,
                                      const NextTokenDistribution& aligned, double lambda);

}  // namespace dera
