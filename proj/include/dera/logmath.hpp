#pragma once

// Log-space probability arithmetic over logit vectors.

#include <span>
#include <vector>

#include "dera/types.hpp"

namespace dera {

// log(sum exp(x)); -inf when every entry is masked (or x is empty).
double logsumexp(std::span<const double> x);

// h - logsumexp(h). Masked entries stay masked. Throws EmptySupport when all
// entries are masked.
LogitVector log_softmax(const LogitVector& h);

NextTokenDistribution softmax(const LogitVector& h);

// log p, with log 0 = -inf.
LogitVector log_of(const NextTokenDistribution& p);

// KL(p || q) in nats for two log-probability vectors, with 0 log 0 = 0.
// +inf when p has mass where q is masked.
double kl_divergence(std::span<const double> logp, std::span<const double> logq);

double total_variation(std::span<const double> p, std::span<const double> q);

}  // namespace dera
