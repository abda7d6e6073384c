#pragma once

// Enumerable toy autoregressive models and exact sequence distributions.
//
// A TabularLM maps (query, context) to a LogitVector. The context is the last
// min(order, depth) tokens of the prefix, optionally tagged with the depth
// (positional models). A prefix of max_len tokens always continues with eos,
// so every response has at most max_len non-eos tokens. Contexts without a
// row use the uniform distribution.

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <utility>
#include <variant>
#include <vector>

#include "dera/types.hpp"

namespace dera {

struct ContextKey {
  QueryId query = 0;
  // -1 for non-positional models.
  std::int32_t depth = -1;
  std::vector<TokenId> context;

  auto operator<=>(const ContextKey&) const = default;
  bool operator==(const ContextKey&) const = default;
};

class TabularLM {
 public:
  TabularLM(Vocab vocab, std::size_t order, std::size_t max_len, bool positional = false);

  const Vocab& vocab() const noexcept { return vocab_; }
  std::size_t order() const noexcept { return order_; }
  std::size_t max_len() const noexcept { return max_len_; }
  bool positional() const noexcept { return positional_; }

  ContextKey key_for(QueryId query, std::span<const TokenId> prefix) const;
  void set_row(const ContextKey& key, LogitVector logits);
  void set_row(QueryId query, std::span<const TokenId> prefix, LogitVector logits) {
    set_row(key_for(query, prefix), std::move(logits));
  }

  // Row for the state reached by `prefix`: the forced-eos row at depth
  // max_len, the uniform row when absent. Prefixes longer than max_len or
  // containing eos are rejected.
  const LogitVector& logits(QueryId query, std::span<const TokenId> prefix) const;
  const LogitVector* find_row(const ContextKey& key) const;

  const std::map<ContextKey, LogitVector>& rows() const noexcept { return rows_; }
  // Queries that own at least one row, ascending.
  std::vector<QueryId> queries() const;

 private:
  Vocab vocab_;
  std::size_t order_;
  std::size_t max_len_;
  bool positional_;
  std::map<ContextKey, LogitVector> rows_;
  LogitVector uniform_;
  LogitVector forced_eos_;
};

// Exact law over every eos-terminated response of length <= max_len, in a
// canonical depth-first order (tokens ascending, eos as a leaf at its index).
// Zero-mass responses are kept with log-probability -inf.
class SequenceDistribution {
 public:
  SequenceDistribution(Vocab vocab, QueryId query, std::size_t max_len,
                       std::vector<Sequence> support, std::vector<double> logprobs);

  // Normalizes arbitrary log-weights. Throws EmptySupport if all are -inf.
  static SequenceDistribution from_log_weights(Vocab vocab, QueryId query, std::size_t max_len,
                                               std::vector<Sequence> support,
                                               std::vector<double> log_weights);

  const Vocab& vocab() const noexcept { return vocab_; }
  QueryId query() const noexcept { return query_; }
  std::size_t max_len() const noexcept { return max_len_; }
  std::size_t size() const noexcept { return support_.size(); }
  const std::vector<Sequence>& support() const noexcept { return support_; }
  const std::vector<double>& logprobs() const noexcept { return logprobs_; }
  double logprob(std::size_t i) const { return logprobs_[i]; }
  double prob(std::size_t i) const;

  // Same vocab, query, max_len and support, element by element.
  bool shares_support(const SequenceDistribution& other) const;

 private:
  Vocab vocab_;
  QueryId query_;
  std::size_t max_len_;
  std::vector<Sequence> support_;
  std::vector<double> logprobs_;
};

// Canonical support for (vocab, max_len); guard as enumerate_dist.
std::vector<Sequence> enumerate_support(const Vocab& vocab, std::size_t max_len);

struct LengthBand {
  std::size_t l_min = 0;
  std::size_t l_max = 0;
};

struct RewardTable {
  std::map<std::pair<QueryId, Sequence>, double> entries;
};

// Reward over full (query, response) pairs. The length band gives 0 inside
// [l_min, l_max] (eos excluded) and -1 outside.
class RewardSpec {
 public:
  static RewardSpec length_band(std::size_t l_min, std::size_t l_max);
  static RewardSpec table(RewardTable table);

  bool is_length_band() const noexcept { return std::holds_alternative<LengthBand>(spec_); }
  const LengthBand& band() const { return std::get<LengthBand>(spec_); }
  const RewardTable& entries() const { return std::get<RewardTable>(spec_); }

  // Throws BadReward for a table entry that is missing.
  double operator()(QueryId query, const Sequence& response, TokenId eos) const;
  double of_length(std::size_t length) const;

  // length_band: l_max <= max_len. table: every response in the support of
  // (query, max_len) has an entry.
  void validate(std::size_t max_len) const;
  void validate_covers(const SequenceDistribution& d) const;

 private:
  explicit RewardSpec(std::variant<LengthBand, RewardTable> spec) : spec_(std::move(spec)) {}
  std::variant<LengthBand, RewardTable> spec_;
};

struct CorpusEntry {
  QueryId query = 0;
  Sequence response;
};

inline constexpr double kDefaultSmoothing = 0.1;

// Additively smoothed maximum likelihood: log((count + alpha) / (total + alpha V))
// per observed context, counting every position up to depth max_len (the final
// eos included). Tokens past max_len are ignored. max_len 0 means the longest
// corpus response.
TabularLM fit_sft(const Vocab& vocab, std::span<const CorpusEntry> corpus, std::size_t order,
                  double alpha = kDefaultSmoothing, std::size_t max_len = 0);

inline constexpr double kEnumerationLimit = 1e6;

// Chain rule over every response. Throws TooLarge when V^max_len > 1e6.
SequenceDistribution enumerate_dist(const TabularLM& model, QueryId query);

// Same walk for any conditional law: `log_row(prefix)` returns the next-token
// log-probabilities after `prefix` (depth < max_len).
using LogRowFn = std::function<LogitVector(std::span<const TokenId> prefix)>;
SequenceDistribution enumerate_chain(const Vocab& vocab, std::size_t max_len, QueryId query,
                                     const LogRowFn& log_row);

// pi*(y) proportional to ref(y) exp(r(y) / beta).
SequenceDistribution align_exact(const SequenceDistribution& ref, const RewardSpec& reward,
                                 double beta);

// Exact per-token conditionals by marginalizing prefix masses. The model has
// full-prefix contexts (order = max_len); zero-mass prefixes get no row.
TabularLM conditionals_of(const SequenceDistribution& d);
TabularLM conditionals_of(std::span<const SequenceDistribution> per_query);

// Row-wise lambda * b + (1 - lambda) * a, with the blend masking rule.
// Throws Incompatible unless vocab, order, max_len and positional agree.
TabularLM interpolate_weights(const TabularLM& a, const TabularLM& b, double lambda);

}  // namespace dera
