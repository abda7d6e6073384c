#pragma once

// Evaluation harness: preference-pair accuracy, judged win rates and lambda
// sweeps that put sampled statistics next to their exact counterparts.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <vector>

#include "dera/oracle.hpp"
#include "dera/rng.hpp"

namespace dera {

struct PreferencePair {
  QueryId query = 0;
  Sequence y_w;  // favored
  Sequence y_l;  // unfavored
};

// One JSON object per line: {"query": q, "chosen": [ids], "rejected": [ids]}.
std::vector<PreferencePair> read_preference_pairs(const std::filesystem::path& path, const Vocab& vocab);
void write_preference_pairs(const std::filesystem::path& path, std::span<const PreferencePair> pairs);

// log pi(y | query) for a complete (eos-terminated) response.
using SequenceScorer = std::function<double(QueryId, const Sequence&)>;

double sequence_logprob(const TabularLM& model, QueryId query, const Sequence& y);
// Log-probability of y under per-token realigned sampling with cfg.
double dera_sequence_logprob(const TabularLM& ref, std::span<const TabularLM> aligned, const RealignConfig& cfg,
                             QueryId query, const Sequence& y);

// Fraction of pairs with log pi(y_w)/|y_w| > log pi(y_l)/|y_l|, where |y|
// counts tokens including eos. Ties are failures. EmptyDataset on no pairs.
double pairwise_accuracy(const SequenceScorer& score, std::span<const PreferencePair> pairs);
double pairwise_accuracy(const TabularLM& model, std::span<const PreferencePair> pairs);

enum class Verdict { A, B };

class Judge {
 public:
  virtual ~Judge() = default;
  virtual Verdict judge(QueryId query, const Sequence& a, const Sequence& b) = 0;
};

// Prefers the higher reward and flips its own seeded coin on ties.
class ExactRewardJudge final : public Judge {
 public:
  ExactRewardJudge(RewardSpec reward, TokenId eos, std::uint64_t seed);
  Verdict judge(QueryId query, const Sequence& a, const Sequence& b) override;

 private:
  RewardSpec reward_;
  TokenId eos_;
  Rng rng_;
};

struct Response {
  QueryId query = 0;
  Sequence y;
};

// Fraction of paired comparisons won by `a`. Each pair is shown to the
// judge in swapped order with probability 1/2 (seeded) and the verdict is
// mapped back. Judge failures surface as Errc::Judge.
double win_rate(std::span<const Response> a, std::span<const Response> b, Judge& judge, std::uint64_t seed);

// Pairs of distinct reference samples whose rewards differ; the higher
// reward becomes y_w. Queries are used round robin.
std::vector<PreferencePair> synthesize_preference_pairs(const TabularLM& ref, const RewardSpec& reward,
                                                        std::span<const QueryId> queries, std::size_t count,
                                                        std::uint64_t seed);

// `count` independent generations (sub-seed derive_seed(seed, i) each).
std::vector<Response> sample_responses(const TabularLM& ref, std::span<const TabularLM> aligned,
                                       const RealignConfig& cfg, std::span<const QueryId> queries,
                                       std::size_t count, std::uint64_t seed);

struct SweepOptions {
  std::vector<double> grid{0.0, 0.5, 1.0, 2.0};
  std::size_t samples = 1000;
  std::uint64_t seed = 0;
  std::vector<QueryId> queries{0};
  DecodingControls controls;
  // Win rates are measured against samples drawn at this lambda.
  double baseline_lambda = 0.0;
  // Scored at every lambda; synthesized from the reference when empty.
  std::vector<PreferencePair> pairs;
  std::size_t synthesized_pairs = 200;
  OracleRoute route = OracleRoute::Auto;
};

struct SweepRecord {
  double lambda = 0.0;
  std::size_t samples = 0;
  double mean_reward = 0.0;
  double reward_std = 0.0;
  // Monte Carlo estimate of KL(pi_lambda || ref) from the drawn samples.
  double kl_to_ref = 0.0;
  // counts[n] = samples with |y| = n.
  std::vector<std::size_t> length_histogram;
  double win_rate = 0.5;
  double pairwise_accuracy = 0.0;
  TradeoffPoint exact;
};

// Every grid point runs concurrently on its own sub-seed
// derive_seed(seed, index), so the records do not depend on scheduling.
std::vector<SweepRecord> run_sweep(const TabularLM& ref, const TabularLM& aligned, const RewardSpec& reward,
                                   double beta, const SweepOptions& options);

void write_sweep_csv(std::ostream& out, std::span<const SweepRecord> records);

// Gnuplot script plotting the sweep CSV at `csv_path`.
std::string sweep_gnuplot_script(const std::string& csv_path);

}  // namespace dera
