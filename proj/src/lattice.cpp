#include "dera/lattice.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "dera/error.hpp"
#include "dera/logmath.hpp"

namespace dera {
namespace {

std::size_t ipow(std::size_t base, std::size_t exp) {
  std::size_t r = 1;
  for (std::size_t i = 0; i < exp; ++i) r *= base;
  return r;
}

std::size_t dependency_len(const TabularLM& m) {
  return m.max_len() == 0 ? 0 : std::min(m.order(), m.max_len() - 1);
}

using Occupancy = std::vector<std::vector<double>>;

Occupancy occupancy(const LatticeChain& chain) {
  Occupancy mu(chain.max_len() + 1);
  for (std::size_t d = 0; d <= chain.max_len(); ++d) mu[d].assign(chain.num_states(d), 0.0);
  mu[0][0] = 1.0;
  const TokenId eos = chain.vocab().eos();
  for (std::size_t d = 0; d < chain.max_len(); ++d) {
    for (std::size_t s = 0; s < mu[d].size(); ++s) {
      if (mu[d][s] == 0.0) continue;
      const LogitVector& row = chain.row(d, s);
      for (std::size_t v = 0; v < row.size(); ++v) {
        const auto t = static_cast<TokenId>(v);
        if (t == eos || row.masked(v)) continue;
        mu[d + 1][chain.next_state(d, s, t)] += mu[d][s] * std::exp(row[v]);
      }
    }
  }
  return mu;
}

}  // namespace

LatticeChain::LatticeChain(Vocab vocab, QueryId query, std::size_t max_len, std::size_t context_len)
    : vocab_(std::move(vocab)), query_(query), max_len_(max_len), context_len_(context_len) {
  letter_.assign(vocab_.size(), -1);
  for (std::size_t v = 0; v < vocab_.size(); ++v) {
    if (static_cast<TokenId>(v) == vocab_.eos()) continue;
    letter_[v] = static_cast<std::int32_t>(alphabet_.size());
    alphabet_.push_back(static_cast<TokenId>(v));
  }
  double total = 0.0;
  for (std::size_t d = 0; d <= max_len_; ++d) {
    total += std::pow(static_cast<double>(alphabet_.size()), static_cast<double>(std::min(d, context_len_)));
  }
  if (total > kLatticeStateLimit) fail(Errc::TooLarge, "lattice has more than 1e6 states");
}

std::size_t LatticeChain::num_states(std::size_t depth) const {
  return ipow(alphabet_.size(), std::min(depth, context_len_));
}

std::vector<TokenId> LatticeChain::context(std::size_t depth, std::size_t state) const {
  const std::size_t k = std::min(depth, context_len_);
  std::vector<TokenId> ctx(k);
  for (std::size_t i = k; i-- > 0;) {
    ctx[i] = alphabet_[state % alphabet_.size()];
    state /= alphabet_.size();
  }
  return ctx;
}

std::size_t LatticeChain::next_state(std::size_t depth, std::size_t state, TokenId token) const {
  const auto a = static_cast<std::size_t>(letter_.at(static_cast<std::size_t>(token)));
  if (context_len_ == 0) return 0;
  if (depth < context_len_) return state * alphabet_.size() + a;
  return (state % ipow(alphabet_.size(), context_len_ - 1)) * alphabet_.size() + a;
}

bool LatticeChain::same_shape(const LatticeChain& other) const {
  return vocab_ == other.vocab_ && query_ == other.query_ && max_len_ == other.max_len_ &&
         context_len_ == other.context_len_;
}

LatticeChain LatticeChain::from_model(const TabularLM& model, QueryId query, std::size_t context_len) {
  if (dependency_len(model) > context_len) {
    fail(Errc::Incompatible, "model order exceeds the lattice context length");
  }
  LatticeChain chain(model.vocab(), query, model.max_len(), context_len);
  chain.rows_.resize(chain.max_len_);
  for (std::size_t d = 0; d < chain.max_len_; ++d) {
    const std::size_t n = chain.num_states(d);
    chain.rows_[d].reserve(n);
    for (std::size_t s = 0; s < n; ++s) {
      const std::vector<TokenId> ctx = chain.context(d, s);
      std::vector<TokenId> prefix(d - ctx.size(), chain.alphabet_.front());
      prefix.insert(prefix.end(), ctx.begin(), ctx.end());
      chain.rows_[d].push_back(log_softmax(model.logits(query, prefix)));
    }
  }
  return chain;
}

void LatticeChain::export_rows(TabularLM& model) const {
  if (!model.positional() || model.order() < context_len_ || model.max_len() != max_len_ ||
      !(model.vocab() == vocab_)) {
    fail(Errc::Incompatible, "target model cannot hold lattice rows");
  }
  for (std::size_t d = 0; d < max_len_; ++d) {
    for (std::size_t s = 0; s < rows_[d].size(); ++s) {
      if (rows_[d][s].support_size() == 0) continue;
      ContextKey key{query_, static_cast<std::int32_t>(d), context(d, s)};
      model.set_row(key, rows_[d][s]);
    }
  }
}

std::size_t lattice_context_len(std::span<const TabularLM* const> models) {
  std::size_t k = 0;
  for (const TabularLM* m : models) k = std::max(k, dependency_len(*m));
  return k;
}

LatticeChain lattice_align(const LatticeChain& ref, const RewardSpec& reward, double strength) {
  if (!reward.is_length_band()) fail(Errc::BadReward, "lattice alignment needs a length-only reward");
  reward.validate(ref.max_len());
  if (!(strength > 0.0)) fail(Errc::BadBeta, "KL strength must be > 0");
  if (std::isinf(strength)) return ref;

  LatticeChain out = ref;
  const TokenId eos = ref.vocab().eos();
  std::vector<double> log_w_next(ref.num_states(ref.max_len()), reward.of_length(ref.max_len()) / strength);
  for (std::size_t d = ref.max_len(); d-- > 0;) {
    std::vector<double> log_w(ref.num_states(d));
    for (std::size_t s = 0; s < log_w.size(); ++s) {
      const LogitVector& row = ref.row(d, s);
      std::vector<double> terms(row.size(), kMasked);
      for (std::size_t v = 0; v < row.size(); ++v) {
        if (row.masked(v)) continue;
        const auto t = static_cast<TokenId>(v);
        terms[v] = row[v] + (t == eos ? reward.of_length(d) / strength : log_w_next[ref.next_state(d, s, t)]);
      }
      log_w[s] = logsumexp(terms);
      for (double& x : terms) x = is_masked(x) ? kMasked : x - log_w[s];
      out.rows_[d][s] = LogitVector(std::move(terms));
    }
    log_w_next = std::move(log_w);
  }
  return out;
}

LatticeChain lattice_blend(const LatticeChain& ref, std::span<const LatticeChain> aligned, const RealignConfig& cfg) {
  for (const auto& a : aligned) {
    if (!a.same_shape(ref)) fail(Errc::Incompatible, "chains live on different lattices");
  }
  LatticeChain out = ref;
  for (std::size_t d = 0; d < ref.max_len(); ++d) {
    for (std::size_t s = 0; s < ref.num_states(d); ++s) {
      BlendInput input{ref.row(d, s), {}};
      for (const auto& a : aligned) input.aligned.push_back(a.row(d, s));
      LogitVector h = blend(input, cfg);
      if (!cfg.controls.is_identity()) h = apply_decoding_controls(h, cfg.controls);
      out.rows_[d][s] = log_softmax(h);
    }
  }
  return out;
}

std::vector<double> lattice_length_distribution(const LatticeChain& chain) {
  const Occupancy mu = occupancy(chain);
  const auto eos = static_cast<std::size_t>(chain.vocab().eos());
  std::vector<double> len(chain.max_len() + 1, 0.0);
  for (std::size_t d = 0; d < chain.max_len(); ++d) {
    for (std::size_t s = 0; s < mu[d].size(); ++s) {
      const LogitVector& row = chain.row(d, s);
      if (!row.masked(eos)) len[d] += mu[d][s] * std::exp(row[eos]);
    }
  }
  for (double m : mu[chain.max_len()]) len[chain.max_len()] += m;
  return len;
}

double lattice_kl(const LatticeChain& p, const LatticeChain& q) {
  if (!p.same_shape(q)) fail(Errc::Incompatible, "chains live on different lattices");
  const Occupancy mu = occupancy(p);
  double kl = 0.0;
  for (std::size_t d = 0; d < p.max_len(); ++d) {
    for (std::size_t s = 0; s < mu[d].size(); ++s) {
      if (mu[d][s] == 0.0) continue;
      kl += mu[d][s] * kl_divergence(p.row(d, s).values(), q.row(d, s).values());
    }
  }
  return kl;
}

TabularLM align_exact_lattice(const TabularLM& ref, std::span<const QueryId> queries, const RewardSpec& reward,
                              double beta) {
  if (!(beta > 0.0) || !std::isfinite(beta)) fail(Errc::BadBeta, "beta must be a finite value > 0");
  const TabularLM* models[] = {&ref};
  const std::size_t k = lattice_context_len(models);
  TabularLM out(ref.vocab(), k, ref.max_len(), /*positional=*/true);
  for (QueryId q : queries) {
    lattice_align(LatticeChain::from_model(ref, q, k), reward, beta).export_rows(out);
  }
  return out;
}

}  // namespace dera
