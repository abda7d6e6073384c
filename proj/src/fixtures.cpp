#include "dera/fixtures.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "dera/error.hpp"
#include "dera/lattice.hpp"

namespace dera {
namespace {

void fill_rows(Rng& rng, TabularLM& model, QueryId query, std::size_t scale_depth, double scale,
               std::vector<TokenId>& prefix) {
  const Vocab& vocab = model.vocab();
  if (prefix.size() == model.max_len()) return;
  const ContextKey key = model.key_for(query, prefix);
  if (!model.find_row(key)) {
    std::vector<double> row(vocab.size());
    for (double& x : row) x = scale * standard_normal(rng);
    model.set_row(key, LogitVector(std::move(row)));
  }
  // Once the context window is full and the model is not positional, deeper
  // prefixes reuse existing rows.
  if (!model.positional() && prefix.size() >= scale_depth) return;
  for (std::size_t v = 0; v < vocab.size(); ++v) {
    if (static_cast<TokenId>(v) == vocab.eos()) continue;
    prefix.push_back(static_cast<TokenId>(v));
    fill_rows(rng, model, query, scale_depth, scale, prefix);
    prefix.pop_back();
  }
}

}  // namespace

double standard_normal(Rng& rng) {
  double u1 = rng.uniform();
  while (u1 <= 0.0) u1 = rng.uniform();
  const double u2 = rng.uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::vector<double> random_simplex(Rng& rng, std::size_t n) {
  std::vector<double> w(n);
  double total = 0.0;
  for (double& x : w) {
    double u = rng.uniform();
    while (u <= 0.0) u = rng.uniform();
    x = -std::log(u);
    total += x;
  }
  for (double& x : w) x /= total;
  return w;
}

Vocab toy_vocab(std::size_t size) {
  if (size < 2) fail(Errc::InvalidArgument, "toy vocabulary needs at least 2 tokens");
  std::vector<std::string> tokens;
  for (std::size_t i = 0; i + 1 < size; ++i) tokens.push_back("t" + std::to_string(i));
  tokens.emplace_back("<eos>");
  return Vocab(std::move(tokens), static_cast<TokenId>(size - 1));
}

TabularLM random_model(Rng& rng, const Vocab& vocab, std::size_t order, std::size_t max_len, double scale,
                       QueryId query) {
  TabularLM model(vocab, order, max_len);
  std::vector<TokenId> prefix;
  fill_rows(rng, model, query, order, scale, prefix);
  return model;
}

RandomInstance random_instance(std::uint64_t seed, const RandomInstanceOptions& o) {
  Rng rng(seed);
  const std::size_t v = o.min_vocab + rng.below(o.max_vocab - o.min_vocab + 1);
  const std::size_t len = o.min_len + rng.below(o.max_len - o.min_len + 1);
  const std::size_t order = rng.below(o.max_order + 1);
  const Vocab vocab = toy_vocab(v);
  TabularLM ref = random_model(rng, vocab, order, len, o.logit_scale);

  if (rng.below(4) == 0) {
    const std::size_t a = rng.below(len + 1);
    const std::size_t b = rng.below(len + 1);
    return RandomInstance{seed, std::move(ref), RewardSpec::length_band(std::min(a, b), std::max(a, b)), o.beta};
  }
  RewardTable table;
  for (const auto& y : enumerate_support(vocab, len)) table.entries[{0, y}] = 2.0 * rng.uniform() - 1.0;
  return RandomInstance{seed, std::move(ref), RewardSpec::table(std::move(table)), o.beta};
}

LengthCorpus synthetic_length_corpus(std::uint64_t seed, std::size_t sentences) {
  std::vector<std::string> tokens;
  for (int i = 1; i <= 11; ++i) tokens.push_back("w" + std::to_string(i));
  tokens.emplace_back("<eos>");
  Vocab vocab(std::move(tokens), 11);

  // Length law over 1..8: mostly short, some long, little mass in 4..6.
  const double weights[] = {0.22, 0.24, 0.18, 0.05, 0.04, 0.04, 0.11, 0.12};
  Rng rng(seed);
  std::vector<CorpusEntry> corpus;
  corpus.reserve(sentences);
  for (std::size_t n = 0; n < sentences; ++n) {
    double u = rng.uniform();
    std::size_t len = 8;
    for (std::size_t i = 0; i < 8; ++i) {
      if (u < weights[i]) {
        len = i + 1;
        break;
      }
      u -= weights[i];
    }
    // Tokens drift upward through the alphabet so the bigram table carries
    // some positional signal.
    std::vector<TokenId> y;
    TokenId t = static_cast<TokenId>(rng.below(3));
    for (std::size_t i = 0; i < len; ++i) {
      y.push_back(t);
      t = static_cast<TokenId>((t + 1 + static_cast<TokenId>(rng.below(2))) % 11);
    }
    y.push_back(vocab.eos());
    corpus.push_back({0, Sequence(std::move(y))});
  }
  return {std::move(vocab), std::move(corpus)};
}

LengthRewardFixture length_reward_fixture(std::uint64_t seed, std::size_t sentences) {
  const LengthCorpus data = synthetic_length_corpus(seed, sentences);
  TabularLM ref = fit_sft(data.vocab, data.corpus, /*order=*/1, kDefaultSmoothing, /*max_len=*/8);
  RewardSpec reward = RewardSpec::length_band(4, 6);
  const double beta = 0.1;
  const QueryId queries[] = {0};
  TabularLM aligned = align_exact_lattice(ref, queries, reward, beta);
  return {std::move(ref), std::move(aligned), std::move(reward), beta};
}

}  // namespace dera
