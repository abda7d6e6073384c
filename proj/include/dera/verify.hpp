#pragma once

// The oracle identity suite behind `dera verify`: every check runs on one
// (reference, aligned, reward, beta) instance and reports its worst
// deviation next to the tolerance it was held to.

#include <string>
#include <vector>

#include "dera/oracle.hpp"

namespace dera {

struct VerifyInstance {
  TabularLM ref;
  TabularLM aligned;
  RewardSpec reward;
  double beta = 0.1;
  std::vector<QueryId> queries{0};
};

struct PropertyCheck {
  std::string name;
  double deviation = 0.0;
  double tolerance = 0.0;
  bool passed = false;
};

struct VerifyOptions {
  // Positive lambdas for the realignment identity; 0 is added for the
  // monotonicity path.
  std::vector<double> lambdas{0.25, 0.5, 1.0, 2.0, 5.0, 10.0};
  double identity_tolerance = 1e-9;
  double token_tolerance = 1e-12;
};

// Checks, in order: scaled_reward_residual, realignment_identity,
// token_geometric_mixture, monotone_reward, monotone_kl, endpoint_gap.
// Enumerates every response, so the TooLarge guard applies.
std::vector<PropertyCheck> verify_instance(const VerifyInstance& instance, const VerifyOptions& options = {});

// Random instance whose aligned model is the exact optimum.
VerifyInstance random_verify_instance(std::uint64_t seed);

}  // namespace dera
