#pragma once

// Exact computations on the state lattice of a Markov language model.
//
// When every model involved looks at no more than the last k tokens (plus,
// optionally, the depth), a response distribution is a Markov chain over
// states (depth d, last min(k, d) tokens). Length-only rewards keep that
// structure under exact alignment, so the optimum, the per-token blend and
// their reward / KL / length statistics can be computed by dynamic
// programming without listing every response. The enumeration route in
// oracle.hpp covers arbitrary rewards on small instances; on those the two
// routes agree to rounding.

#include <span>
#include <vector>

#include "dera/realign.hpp"
#include "dera/tabular.hpp"

namespace dera {

class LatticeChain {
 public:
  // Row log-probabilities of `model` at every lattice state. The model must
  // depend on at most `context_len` trailing tokens.
  static LatticeChain from_model(const TabularLM& model, QueryId query, std::size_t context_len);

  const Vocab& vocab() const noexcept { return vocab_; }
  QueryId query() const noexcept { return query_; }
  std::size_t max_len() const noexcept { return max_len_; }
  std::size_t context_len() const noexcept { return context_len_; }

  std::size_t num_states(std::size_t depth) const;
  std::vector<TokenId> context(std::size_t depth, std::size_t state) const;
  // State reached from (depth, state) by a non-eos token.
  std::size_t next_state(std::size_t depth, std::size_t state, TokenId token) const;

  // Log-probability row at (depth, state); depth < max_len.
  const LogitVector& row(std::size_t depth, std::size_t state) const { return rows_[depth][state]; }

  bool same_shape(const LatticeChain& other) const;

  // Positional rows keyed by (query, depth, context), added to `model`.
  void export_rows(TabularLM& model) const;

 private:
  friend LatticeChain lattice_align(const LatticeChain&, const RewardSpec&, double);
  friend LatticeChain lattice_blend(const LatticeChain&, std::span<const LatticeChain>, const RealignConfig&);

  LatticeChain(Vocab vocab, QueryId query, std::size_t max_len, std::size_t context_len);

  Vocab vocab_;
  QueryId query_;
  std::size_t max_len_;
  std::size_t context_len_;
  std::vector<TokenId> alphabet_;      // non-eos tokens, ascending
  std::vector<std::int32_t> letter_;   // token -> alphabet position, -1 for eos
  std::vector<std::vector<LogitVector>> rows_;
};

// Context length covering every given model.
std::size_t lattice_context_len(std::span<const TabularLM* const> models);

inline constexpr double kLatticeStateLimit = 1e6;

// Exact optimum at KL strength `strength` for a length-band reward; +inf
// returns the reference.
LatticeChain lattice_align(const LatticeChain& ref, const RewardSpec& reward, double strength);

// Per-token realigned chain (blend, decoding controls, renormalize).
LatticeChain lattice_blend(const LatticeChain& ref, std::span<const LatticeChain> aligned,
                           const RealignConfig& cfg);

// P(|y| = n), n = 0..max_len.
std::vector<double> lattice_length_distribution(const LatticeChain& chain);

// KL(p || q) between the response laws of two chains on the same lattice.
double lattice_kl(const LatticeChain& p, const LatticeChain& q);

// Positional model reproducing the exact optimum for each query.
TabularLM align_exact_lattice(const TabularLM& ref, std::span<const QueryId> queries, const RewardSpec& reward,
                              double beta);

}  // namespace dera
