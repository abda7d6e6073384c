#include "dera/tabular.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <set>

#include "dera/error.hpp"
#include "dera/kernels.hpp"
#include "dera/logmath.hpp"

namespace dera {
namespace {

double log_add(double a, double b) {
  if (is_masked(a)) return b;
  if (is_masked(b)) return a;
  const double m = std::max(a, b);
  return m + std::log1p(std::exp(-std::abs(a - b)));
}

void check_enumerable(const Vocab& vocab, std::size_t max_len) {
  const double n = std::pow(static_cast<double>(vocab.size()), static_cast<double>(max_len));
  if (n > kEnumerationLimit) {
    fail(Errc::TooLarge, "enumeration of V^max_len = " + std::to_string(vocab.size()) + "^" +
                             std::to_string(max_len) + " responses exceeds the 1e6 guard");
  }
}

// Depth-first walk in canonical order; `leaf(prefix, eos)` per response.
template <typename Leaf>
void walk_support(const Vocab& vocab, std::size_t max_len, std::vector<TokenId>& prefix, Leaf&& leaf) {
  const TokenId eos = vocab.eos();
  if (prefix.size() == max_len) {
    leaf(prefix, eos);
    return;
  }
  for (std::size_t v = 0; v < vocab.size(); ++v) {
    const auto t = static_cast<TokenId>(v);
    if (t == eos) {
      leaf(prefix, eos);
    } else {
      prefix.push_back(t);
      walk_support(vocab, max_len, prefix, leaf);
      prefix.pop_back();
    }
  }
}

}  // namespace

// --- TabularLM ---------------------------------------------------------------

TabularLM::TabularLM(Vocab vocab, std::size_t order, std::size_t max_len, bool positional)
    : vocab_(std::move(vocab)),
      order_(order),
      max_len_(max_len),
      positional_(positional),
      uniform_(uniform_logits(vocab_.size())),
      forced_eos_(one_hot_logits(vocab_.size(), vocab_.eos())) {}

ContextKey TabularLM::key_for(QueryId query, std::span<const TokenId> prefix) const {
  for (TokenId t : prefix) {
    if (t < 0 || static_cast<std::size_t>(t) >= vocab_.size() || t == vocab_.eos()) {
      fail(Errc::InvalidArgument, "prefix holds an invalid token " + std::to_string(t));
    }
  }
  const std::size_t k = std::min(order_, prefix.size());
  ContextKey key;
  key.query = query;
  key.depth = positional_ ? static_cast<std::int32_t>(prefix.size()) : -1;
  key.context.assign(prefix.end() - static_cast<std::ptrdiff_t>(k), prefix.end());
  return key;
}

void TabularLM::set_row(const ContextKey& key, LogitVector logits) {
  if (logits.size() != vocab_.size()) fail(Errc::Incompatible, "row size differs from vocabulary size");
  if (key.context.size() > order_) fail(Errc::InvalidArgument, "context longer than model order");
  if (positional_ != (key.depth >= 0)) fail(Errc::InvalidArgument, "row depth does not match model kind");
  rows_.insert_or_assign(key, std::move(logits));
}

const LogitVector& TabularLM::logits(QueryId query, std::span<const TokenId> prefix) const {
  if (prefix.size() > max_len_) fail(Errc::InvalidArgument, "prefix longer than max_len");
  const ContextKey key = key_for(query, prefix);
  if (prefix.size() == max_len_) return forced_eos_;
  const LogitVector* row = find_row(key);
  return row ? *row : uniform_;
}

const LogitVector* TabularLM::find_row(const ContextKey& key) const {
  auto it = rows_.find(key);
  return it == rows_.end() ? nullptr : &it->second;
}

std::vector<QueryId> TabularLM::queries() const {
  std::set<QueryId> qs;
  for (const auto& [key, row] : rows_) qs.insert(key.query);
  return {qs.begin(), qs.end()};
}

// --- SequenceDistribution ----------------------------------------------------

SequenceDistribution::SequenceDistribution(Vocab vocab, QueryId query, std::size_t max_len,
                                           std::vector<Sequence> support, std::vector<double> logprobs)
    : vocab_(std::move(vocab)),
      query_(query),
      max_len_(max_len),
      support_(std::move(support)),
      logprobs_(std::move(logprobs)) {
  if (support_.size() != logprobs_.size()) fail(Errc::InvalidArgument, "support/logprob size mismatch");
  for (double lp : logprobs_) {
    if (std::isnan(lp) || lp > 1e-9) fail(Errc::InvalidArgument, "invalid log-probability");
  }
  const double total = logsumexp(logprobs_);
  if (!(std::abs(total) <= 1e-9)) {
    fail(Errc::InvalidArgument, "sequence distribution mass is not 1 (log mass " + std::to_string(total) + ")");
  }
}

SequenceDistribution SequenceDistribution::from_log_weights(Vocab vocab, QueryId query, std::size_t max_len,
                                                            std::vector<Sequence> support,
                                                            std::vector<double> log_weights) {
  const double lse = logsumexp(log_weights);
  if (is_masked(lse) || !std::isfinite(lse)) fail(Errc::EmptySupport, "no sequence has positive weight");
  for (double& w : log_weights) w = is_masked(w) ? kMasked : w - lse;
  return SequenceDistribution(std::move(vocab), query, max_len, std::move(support), std::move(log_weights));
}

double SequenceDistribution::prob(std::size_t i) const {
  return is_masked(logprobs_[i]) ? 0.0 : std::exp(logprobs_[i]);
}

bool SequenceDistribution::shares_support(const SequenceDistribution& other) const {
  return vocab_ == other.vocab_ && query_ == other.query_ && max_len_ == other.max_len_ &&
         support_ == other.support_;
}

std::vector<Sequence> enumerate_support(const Vocab& vocab, std::size_t max_len) {
  check_enumerable(vocab, max_len);
  std::vector<Sequence> out;
  std::vector<TokenId> prefix;
  walk_support(vocab, max_len, prefix, [&](const std::vector<TokenId>& p, TokenId eos) {
    std::vector<TokenId> seq = p;
    seq.push_back(eos);
    out.emplace_back(std::move(seq));
  });
  return out;
}

// --- RewardSpec --------------------------------------------------------------

RewardSpec RewardSpec::length_band(std::size_t l_min, std::size_t l_max) {
  if (l_min > l_max) fail(Errc::BadReward, "length band needs l_min <= l_max");
  return RewardSpec(LengthBand{l_min, l_max});
}

RewardSpec RewardSpec::table(RewardTable table) {
  for (const auto& [key, r] : table.entries) {
    if (!std::isfinite(r)) fail(Errc::BadReward, "reward table values must be finite");
  }
  return RewardSpec(std::move(table));
}

double RewardSpec::of_length(std::size_t length) const {
  const auto& b = band();
  return (length >= b.l_min && length <= b.l_max) ? 0.0 : -1.0;
}

double RewardSpec::operator()(QueryId query, const Sequence& response, TokenId eos) const {
  if (is_length_band()) return of_length(response.response_length(eos));
  const auto& e = entries().entries;
  auto it = e.find({query, response});
  if (it == e.end()) fail(Errc::BadReward, "reward table has no entry for a response");
  return it->second;
}

void RewardSpec::validate(std::size_t max_len) const {
  if (is_length_band() && band().l_max > max_len) {
    fail(Errc::BadReward, "length band exceeds max_len");
  }
}

void RewardSpec::validate_covers(const SequenceDistribution& d) const {
  validate(d.max_len());
  if (is_length_band()) return;
  for (const auto& y : d.support()) (void)(*this)(d.query(), y, d.vocab().eos());
}

// --- Operations --------------------------------------------------------------

TabularLM fit_sft(const Vocab& vocab, std::span<const CorpusEntry> corpus, std::size_t order, double alpha,
                  std::size_t max_len) {
  if (!(alpha > 0.0) || !std::isfinite(alpha)) fail(Errc::BadSmoothing, "smoothing alpha must be > 0");
  if (corpus.empty()) fail(Errc::EmptyCorpus, "empty corpus");
  std::size_t longest = 0;
  for (const auto& entry : corpus) {
    entry.response.validate(vocab);
    if (!entry.response.terminated(vocab.eos())) fail(Errc::InvalidArgument, "corpus response lacks eos");
    longest = std::max(longest, entry.response.response_length(vocab.eos()));
  }
  if (max_len == 0) max_len = longest;

  TabularLM model(vocab, order, max_len);
  std::map<ContextKey, std::vector<double>> counts;
  for (const auto& entry : corpus) {
    const auto tokens = entry.response.tokens();
    for (std::size_t t = 0; t < tokens.size() && t <= max_len; ++t) {
      auto& c = counts[model.key_for(entry.query, tokens.first(t))];
      if (c.empty()) c.assign(vocab.size(), 0.0);
      c[static_cast<std::size_t>(tokens[t])] += 1.0;
    }
  }

  const double v = static_cast<double>(vocab.size());
  for (const auto& [key, c] : counts) {
    double total = 0.0;
    for (double x : c) total += x;
    std::vector<double> row(c.size());
    for (std::size_t i = 0; i < c.size(); ++i) row[i] = std::log((c[i] + alpha) / (total + alpha * v));
    model.set_row(key, LogitVector(std::move(row)));
  }
  return model;
}

SequenceDistribution enumerate_chain(const Vocab& vocab, std::size_t max_len, QueryId query,
                                     const LogRowFn& log_row) {
  check_enumerable(vocab, max_len);
  std::vector<Sequence> support;
  std::vector<double> logprobs;
  std::vector<TokenId> prefix;

  const auto emit = [&](double lp, std::initializer_list<TokenId> tail) {
    std::vector<TokenId> seq = prefix;
    seq.insert(seq.end(), tail);
    support.emplace_back(std::move(seq));
    logprobs.push_back(lp);
  };
  std::function<void(double)> visit = [&](double lp) {
    // Zero-mass prefixes are not evaluated; their subtree stays at -inf.
    const LogitVector row = is_masked(lp) ? LogitVector::unchecked(std::vector<double>(vocab.size(), kMasked))
                                          : log_row(prefix);
    if (row.size() != vocab.size()) fail(Errc::Incompatible, "row size differs from vocabulary size");
    for (std::size_t v = 0; v < vocab.size(); ++v) {
      const auto t = static_cast<TokenId>(v);
      const double next = (is_masked(lp) || is_masked(row[v])) ? kMasked : lp + row[v];
      if (t == vocab.eos()) {
        emit(next, {t});
      } else if (prefix.size() + 1 == max_len) {
        // Depth max_len forces eos with probability 1.
        emit(next, {t, vocab.eos()});
      } else {
        prefix.push_back(t);
        visit(next);
        prefix.pop_back();
      }
    }
  };
  if (max_len == 0) {
    emit(0.0, {vocab.eos()});
  } else {
    visit(0.0);
  }
  return SequenceDistribution(vocab, query, max_len, std::move(support), std::move(logprobs));
}

SequenceDistribution enumerate_dist(const TabularLM& model, QueryId query) {
  return enumerate_chain(model.vocab(), model.max_len(), query, [&](std::span<const TokenId> prefix) {
    return log_softmax(model.logits(query, prefix));
  });
}

SequenceDistribution align_exact(const SequenceDistribution& ref, const RewardSpec& reward, double beta) {
  if (!(beta > 0.0) || !std::isfinite(beta)) fail(Errc::BadBeta, "beta must be a finite value > 0");
  reward.validate_covers(ref);
  std::vector<double> w(ref.size());
  const TokenId eos = ref.vocab().eos();
  for (std::size_t i = 0; i < ref.size(); ++i) {
    const double lp = ref.logprob(i);
    w[i] = is_masked(lp) ? kMasked : lp + reward(ref.query(), ref.support()[i], eos) / beta;
  }
  return SequenceDistribution::from_log_weights(ref.vocab(), ref.query(), ref.max_len(), ref.support(),
                                                std::move(w));
}

TabularLM conditionals_of(const SequenceDistribution& d) {
  return conditionals_of(std::span<const SequenceDistribution>(&d, 1));
}

TabularLM conditionals_of(std::span<const SequenceDistribution> per_query) {
  if (per_query.empty()) fail(Errc::InvalidArgument, "conditionals_of needs at least one distribution");
  const Vocab& vocab = per_query.front().vocab();
  const std::size_t max_len = per_query.front().max_len();
  TabularLM model(vocab, max_len, max_len);

  for (const auto& d : per_query) {
    if (!(d.vocab() == vocab) || d.max_len() != max_len) {
      fail(Errc::Incompatible, "distributions disagree on vocabulary or max_len");
    }
    std::map<std::vector<TokenId>, std::vector<double>> mass;
    for (std::size_t i = 0; i < d.size(); ++i) {
      const double lp = d.logprob(i);
      if (is_masked(lp)) continue;
      const auto tokens = d.support()[i].tokens();
      std::vector<TokenId> prefix;
      for (std::size_t t = 0; t < tokens.size() && t < max_len; ++t) {
        auto& m = mass[prefix];
        if (m.empty()) m.assign(vocab.size(), kMasked);
        const auto next = static_cast<std::size_t>(tokens[t]);
        m[next] = log_add(m[next], lp);
        prefix.push_back(tokens[t]);
      }
    }
    for (auto& [prefix, m] : mass) {
      const double total = logsumexp(m);
      if (is_masked(total)) continue;
      for (double& x : m) x = is_masked(x) ? kMasked : x - total;
      model.set_row(d.query(), prefix, LogitVector(std::move(m)));
    }
  }
  return model;
}

TabularLM interpolate_weights(const TabularLM& a, const TabularLM& b, double lambda) {
  if (!(a.vocab() == b.vocab()) || a.order() != b.order() || a.max_len() != b.max_len() ||
      a.positional() != b.positional()) {
    fail(Errc::Incompatible, "interpolate_weights needs models of the same shape");
  }
  if (!std::isfinite(lambda)) fail(Errc::BadLambda, "lambda must be finite");
  std::set<ContextKey> keys;
  for (const auto& [k, row] : a.rows()) keys.insert(k);
  for (const auto& [k, row] : b.rows()) keys.insert(k);

  const auto& kern = kernels::active();
  const LogitVector uniform = uniform_logits(a.vocab().size());
  TabularLM out(a.vocab(), a.order(), a.max_len(), a.positional());
  for (const auto& key : keys) {
    const LogitVector* ra = a.find_row(key);
    const LogitVector* rb = b.find_row(key);
    std::vector<double> row(a.vocab().size());
    kern.scale_into(row, (ra ? *ra : uniform).values(), 1.0 - lambda);
    kern.accumulate(row, (rb ? *rb : uniform).values(), lambda);
    auto lv = LogitVector::unchecked(std::move(row));
    if (lv.support_size() == 0) fail(Errc::EmptySupport, "interpolated row has no support");
    out.set_row(key, std::move(lv));
  }
  return out;
}

}  // namespace dera
