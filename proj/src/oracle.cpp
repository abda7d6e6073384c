#include "dera/oracle.hpp"

#include <cmath>
#include <future>
#include <limits>
#include <ostream>

#include "dera/error.hpp"
#include "dera/format.hpp"
#include "dera/lattice.hpp"
#include "dera/logmath.hpp"

namespace dera {
namespace {

void require_shared(const SequenceDistribution& a, const SequenceDistribution& b) {
  if (!a.shares_support(b)) fail(Errc::SupportMismatch, "sequence distributions do not share a support");
}

std::vector<double> rewards_of(const SequenceDistribution& d, const RewardSpec& reward) {
  reward.validate_covers(d);
  std::vector<double> r(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) r[i] = reward(d.query(), d.support()[i], d.vocab().eos());
  return r;
}

void check_models(const TabularLM& ref, std::span<const TabularLM> aligned) {
  for (const auto& a : aligned) {
    if (!(a.vocab() == ref.vocab()) || a.max_len() != ref.max_len()) {
      fail(Errc::Incompatible, "reference and aligned models differ in vocabulary or max_len");
    }
  }
}

void check_grid(std::span<const double> grid) {
  for (std::size_t i = 0; i < grid.size(); ++i) {
    validate_lambda(grid[i]);
    if (i > 0 && grid[i] < grid[i - 1]) fail(Errc::BadLambda, "lambda grid must be sorted ascending");
  }
}

double mean_of(const std::vector<double>& len, const RewardSpec& reward, bool square) {
  double m = 0.0;
  for (std::size_t n = 0; n < len.size(); ++n) {
    const double r = reward.of_length(n);
    m += len[n] * (square ? r * r : r);
  }
  return m;
}

std::vector<double> length_dist_of(const SequenceDistribution& d) { return length_distribution(d); }

// Accumulates one query's contribution with weight w.
void add_into(TradeoffPoint& acc, const TradeoffPoint& p, double w) {
  acc.expected_reward_exact += w * p.expected_reward_exact;
  acc.expected_reward_dera += w * p.expected_reward_dera;
  acc.kl_ref_exact += w * p.kl_ref_exact;
  acc.kl_ref_dera += w * p.kl_ref_dera;
  acc.approx_gap += w * p.approx_gap;
  acc.reward_variance_dera += w * p.reward_variance_dera;
  if (acc.length_dist_exact.empty()) {
    acc.length_dist_exact.assign(p.length_dist_exact.size(), 0.0);
    acc.length_dist_dera.assign(p.length_dist_dera.size(), 0.0);
  }
  for (std::size_t i = 0; i < p.length_dist_exact.size(); ++i) {
    acc.length_dist_exact[i] += w * p.length_dist_exact[i];
    acc.length_dist_dera[i] += w * p.length_dist_dera[i];
  }
}

TradeoffPoint point_enumerated(const TabularLM& ref_lm, const TabularLM& aligned_lm, const RewardSpec& reward,
                               double beta, double lambda, const TradeoffOptions& options, QueryId q,
                               const SequenceDistribution& ref, const SequenceDistribution& aligned_exact) {
  RealignConfig cfg;
  cfg.beta = beta;
  cfg.lambda = lambda;
  cfg.controls = options.controls;
  const SequenceDistribution exact = realigned_exact(ref, aligned_exact, lambda);
  const SequenceDistribution dera = dera_sequence_dist(ref_lm, aligned_lm, cfg, q);
  TradeoffPoint p;
  p.expected_reward_exact = expected_reward(exact, reward);
  p.expected_reward_dera = expected_reward(dera, reward);
  p.kl_ref_exact = sequence_kl(exact, ref);
  p.kl_ref_dera = sequence_kl(dera, ref);
  p.approx_gap = sequence_kl(exact, dera);
  p.reward_variance_dera = reward_variance(dera, reward);
  p.length_dist_exact = length_dist_of(exact);
  p.length_dist_dera = length_dist_of(dera);
  return p;
}

TradeoffPoint point_lattice(const LatticeChain& ref, const LatticeChain& aligned, const RewardSpec& reward,
                            double beta, double lambda, const TradeoffOptions& options) {
  RealignConfig cfg;
  cfg.beta = beta;
  cfg.lambda = lambda;
  cfg.controls = options.controls;
  const double strength = lambda == 0.0 ? std::numeric_limits<double>::infinity() : beta / lambda;
  const LatticeChain exact = lattice_align(ref, reward, strength);
  const LatticeChain dera = lattice_blend(ref, std::span<const LatticeChain>(&aligned, 1), cfg);
  TradeoffPoint p;
  p.length_dist_exact = lattice_length_distribution(exact);
  p.length_dist_dera = lattice_length_distribution(dera);
  p.expected_reward_exact = mean_of(p.length_dist_exact, reward, false);
  p.expected_reward_dera = mean_of(p.length_dist_dera, reward, false);
  p.reward_variance_dera =
      std::max(0.0, mean_of(p.length_dist_dera, reward, true) - p.expected_reward_dera * p.expected_reward_dera);
  p.kl_ref_exact = lattice_kl(exact, ref);
  p.kl_ref_dera = lattice_kl(dera, ref);
  p.approx_gap = lattice_kl(exact, dera);
  return p;
}

void write_number(std::ostream& out, double x) { out << format_double(x); }

}  // namespace

SequenceDistribution realigned_exact(const SequenceDistribution& ref, const SequenceDistribution& aligned,
                                     double lambda) {
  validate_lambda(lambda);
  require_shared(ref, aligned);
  std::vector<double> w(ref.size());
  for (std::size_t i = 0; i < ref.size(); ++i) {
    const double r = ref.logprob(i);
    const double a = aligned.logprob(i);
    if (is_masked(r)) {
      if (!is_masked(a) && lambda != 0.0) {
        fail(Errc::SupportMismatch, "aligned distribution has mass outside the reference support");
      }
      w[i] = kMasked;
    } else if (lambda == 0.0) {
      w[i] = r;
    } else if (is_masked(a)) {
      w[i] = kMasked;
    } else {
      w[i] = r + lambda * (a - r);
    }
  }
  return SequenceDistribution::from_log_weights(ref.vocab(), ref.query(), ref.max_len(), ref.support(),
                                                std::move(w));
}

double scaled_reward_residual(const SequenceDistribution& ref, const SequenceDistribution& aligned,
                              const RewardSpec& reward, double beta) {
  require_shared(ref, aligned);
  if (!(beta > 0.0)) fail(Errc::BadBeta, "beta must be > 0");
  const std::vector<double> r = rewards_of(ref, reward);
  std::vector<double> bracket;
  bracket.reserve(ref.size());
  for (std::size_t i = 0; i < ref.size(); ++i) {
    const bool ref_pos = !is_masked(ref.logprob(i));
    const bool al_pos = !is_masked(aligned.logprob(i));
    if (ref_pos != al_pos) return std::numeric_limits<double>::infinity();
    if (!ref_pos) continue;
    bracket.push_back(r[i] / beta - (aligned.logprob(i) - ref.logprob(i)));
  }
  if (bracket.empty()) return 0.0;
  double c = 0.0;
  for (double b : bracket) c += b;
  c /= static_cast<double>(bracket.size());
  double worst = 0.0;
  for (double b : bracket) worst = std::max(worst, std::abs(b - c));
  return worst;
}

double expected_reward(const SequenceDistribution& d, const RewardSpec& reward) {
  const std::vector<double> r = rewards_of(d, reward);
  double e = 0.0;
  for (std::size_t i = 0; i < d.size(); ++i) e += d.prob(i) * r[i];
  return e;
}

double reward_variance(const SequenceDistribution& d, const RewardSpec& reward) {
  const std::vector<double> r = rewards_of(d, reward);
  const double m = expected_reward(d, reward);
  double v = 0.0;
  for (std::size_t i = 0; i < d.size(); ++i) v += d.prob(i) * (r[i] - m) * (r[i] - m);
  return v;
}

double sequence_kl(const SequenceDistribution& p, const SequenceDistribution& q) {
  require_shared(p, q);
  return kl_divergence(p.logprobs(), q.logprobs());
}

double objective_value(const SequenceDistribution& pi, const SequenceDistribution& ref, const RewardSpec& reward,
                       double beta) {
  return expected_reward(pi, reward) - beta * sequence_kl(pi, ref);
}

std::vector<double> length_distribution(const SequenceDistribution& d) {
  std::vector<double> len(d.max_len() + 1, 0.0);
  for (std::size_t i = 0; i < d.size(); ++i) {
    len[d.support()[i].response_length(d.vocab().eos())] += d.prob(i);
  }
  return len;
}

SequenceDistribution dera_sequence_dist(const TabularLM& ref_lm, std::span<const TabularLM> aligned_lms,
                                        const RealignConfig& cfg, QueryId query) {
  check_models(ref_lm, aligned_lms);
  cfg.validate(ref_lm.vocab().size());
  return enumerate_chain(ref_lm.vocab(), ref_lm.max_len(), query, [&](std::span<const TokenId> prefix) {
    BlendInput input{ref_lm.logits(query, prefix), {}};
    for (const auto& a : aligned_lms) input.aligned.push_back(a.logits(query, prefix));
    LogitVector h = blend(input, cfg);
    if (!cfg.controls.is_identity()) h = apply_decoding_controls(h, cfg.controls);
    return log_softmax(h);
  });
}

SequenceDistribution dera_sequence_dist(const TabularLM& ref_lm, const TabularLM& aligned_lm,
                                        const RealignConfig& cfg, QueryId query) {
  return dera_sequence_dist(ref_lm, std::span<const TabularLM>(&aligned_lm, 1), cfg, query);
}

std::vector<TradeoffPoint> tradeoff_curve(const TabularLM& ref_lm, const TabularLM& aligned_lm,
                                          const RewardSpec& reward, double beta, std::span<const double> grid,
                                          const TradeoffOptions& options) {
  if (!(beta > 0.0) || !std::isfinite(beta)) fail(Errc::BadBeta, "beta must be a finite value > 0");
  check_grid(grid);
  check_models(ref_lm, std::span<const TabularLM>(&aligned_lm, 1));
  reward.validate(ref_lm.max_len());
  if (options.queries.empty()) fail(Errc::InvalidArgument, "tradeoff_curve needs at least one query");
  OracleRoute route = options.route;
  if (route == OracleRoute::Auto) route = reward.is_length_band() ? OracleRoute::Lattice : OracleRoute::Enumerate;

  const double w = 1.0 / static_cast<double>(options.queries.size());
  std::vector<TradeoffPoint> points(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) {
    points[i].lambda = grid[i];
    points[i].effective_strength = grid[i] == 0.0 ? std::numeric_limits<double>::infinity() : beta / grid[i];
  }

  for (QueryId q : options.queries) {
    std::vector<std::future<TradeoffPoint>> futures;
    if (route == OracleRoute::Enumerate) {
      const SequenceDistribution ref = enumerate_dist(ref_lm, q);
      const SequenceDistribution aligned = align_exact(ref, reward, beta);
      for (double lambda : grid) {
        futures.push_back(std::async(std::launch::async, [&, lambda] {
          return point_enumerated(ref_lm, aligned_lm, reward, beta, lambda, options, q, ref, aligned);
        }));
      }
      for (std::size_t i = 0; i < grid.size(); ++i) add_into(points[i], futures[i].get(), w);
    } else {
      const TabularLM* models[] = {&ref_lm, &aligned_lm};
      const std::size_t k = lattice_context_len(models);
      const LatticeChain ref = LatticeChain::from_model(ref_lm, q, k);
      const LatticeChain aligned = LatticeChain::from_model(aligned_lm, q, k);
      for (double lambda : grid) {
        futures.push_back(std::async(std::launch::async, [&, lambda] {
          return point_lattice(ref, aligned, reward, beta, lambda, options);
        }));
      }
      for (std::size_t i = 0; i < grid.size(); ++i) add_into(points[i], futures[i].get(), w);
    }
  }
  return points;
}

void write_tradeoff_csv(std::ostream& out, std::span<const TradeoffPoint> points) {
  out << "lambda,effective_strength,expected_reward_exact,expected_reward_dera,kl_ref_exact,kl_ref_dera,"
         "approx_gap\n";
  for (const auto& p : points) {
    for (double x : {p.lambda, p.effective_strength, p.expected_reward_exact, p.expected_reward_dera,
                     p.kl_ref_exact, p.kl_ref_dera}) {
      write_number(out, x);
      out << ',';
    }
    write_number(out, p.approx_gap);
    out << '\n';
  }
}

}  // namespace dera
