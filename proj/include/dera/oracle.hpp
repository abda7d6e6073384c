#pragma once

// Brute-force ground truth for realignment: exact sequence-level realigned
// laws, the identities they satisfy, and measurements of how far the
// per-token blend drifts from them.

#include <iosfwd>
#include <span>
#include <vector>

#include "dera/realign.hpp"
#include "dera/tabular.hpp"

namespace dera {

// ref * (aligned / ref)^lambda, renormalized over the shared support.
SequenceDistribution realigned_exact(const SequenceDistribution& ref, const SequenceDistribution& aligned,
                                     double lambda);

// max_y |r(y)/beta - (log aligned(y) - log ref(y)) - c| with c the mean of
// the bracket over responses with positive mass. Zero up to rounding when
// aligned = align_exact(ref, r, beta).
double scaled_reward_residual(const SequenceDistribution& ref, const SequenceDistribution& aligned,
                              const RewardSpec& reward, double beta);

// E_pi[r] - beta KL(pi || ref).
double objective_value(const SequenceDistribution& pi, const SequenceDistribution& ref,
                       const RewardSpec& reward, double beta);

double expected_reward(const SequenceDistribution& d, const RewardSpec& reward);
double reward_variance(const SequenceDistribution& d, const RewardSpec& reward);
// KL(p || q) in nats over a shared support.
double sequence_kl(const SequenceDistribution& p, const SequenceDistribution& q);
// P(|y| = n) for n = 0..max_len.
std::vector<double> length_distribution(const SequenceDistribution& d);

// Exact law of per-token realigned sampling (cfg.lambda, cfg.controls) for
// one query, by multiplying blended conditionals along every path.
SequenceDistribution dera_sequence_dist(const TabularLM& ref_lm, std::span<const TabularLM> aligned_lms,
                                        const RealignConfig& cfg, QueryId query = 0);
SequenceDistribution dera_sequence_dist(const TabularLM& ref_lm, const TabularLM& aligned_lm,
                                        const RealignConfig& cfg, QueryId query = 0);

struct TradeoffPoint {
  double lambda = 0.0;
  double effective_strength = 0.0;
  // "exact": the optimum at strength beta/lambda. "dera": per-token blend.
  double expected_reward_exact = 0.0;
  double expected_reward_dera = 0.0;
  double kl_ref_exact = 0.0;
  double kl_ref_dera = 0.0;
  // KL(exact || dera).
  double approx_gap = 0.0;
  // Extra statistics carried for sweeps; averaged over queries.
  double reward_variance_dera = 0.0;
  std::vector<double> length_dist_exact;
  std::vector<double> length_dist_dera;
};

enum class OracleRoute { Auto, Enumerate, Lattice };

struct TradeoffOptions {
  std::vector<QueryId> queries{0};
  DecodingControls controls;
  // Auto: lattice for length-band rewards, enumeration otherwise.
  OracleRoute route = OracleRoute::Auto;
};

// One point per lambda; quantities are averaged uniformly over the queries.
// The grid must be non-negative and sorted ascending.
std::vector<TradeoffPoint> tradeoff_curve(const TabularLM& ref_lm, const TabularLM& aligned_lm,
                                          const RewardSpec& reward, double beta, std::span<const double> grid,
                                          const TradeoffOptions& options = {});

void write_tradeoff_csv(std::ostream& out, std::span<const TradeoffPoint> points);

}  // namespace dera
