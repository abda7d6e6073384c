#pragma once

// Deterministic toy instances shared by the verifier, the tests and the
// bundled length-reward data.

#include <cstdint>
#include <vector>

#include "dera/rng.hpp"
#include "dera/tabular.hpp"

namespace dera {

// Standard normal via Box-Muller on Rng::uniform (portable).
double standard_normal(Rng& rng);
// Uniform point on the probability simplex (Dirichlet(1, ..., 1)).
std::vector<double> random_simplex(Rng& rng, std::size_t n);

// Tokens "t0".."t{V-2}" followed by "<eos>".
Vocab toy_vocab(std::size_t size);

// Every context up to `order` (for every depth when positional) gets a row
// of N(0, scale^2) logits.
TabularLM random_model(Rng& rng, const Vocab& vocab, std::size_t order, std::size_t max_len, double scale,
                       QueryId query = 0);

struct RandomInstanceOptions {
  std::size_t min_vocab = 2;
  std::size_t max_vocab = 4;
  std::size_t min_len = 1;
  std::size_t max_len = 4;
  std::size_t max_order = 2;
  double logit_scale = 2.0;
  double beta = 0.1;
};

struct RandomInstance {
  std::uint64_t seed = 0;
  TabularLM ref;
  RewardSpec reward;
  double beta = 0.1;
};

// Random reference model plus a reward: a table of U(-1, 1) rewards, or
// (one seed in four) a random length band.
RandomInstance random_instance(std::uint64_t seed, const RandomInstanceOptions& options = {});

// Twelve-token corpus for the length-reward experiment: "w1".."w11" plus
// "<eos>", responses of 1..8 tokens with most mass outside the 4..6 band.
struct LengthCorpus {
  Vocab vocab;
  std::vector<CorpusEntry> corpus;
};
LengthCorpus synthetic_length_corpus(std::uint64_t seed, std::size_t sentences);

struct LengthRewardFixture {
  TabularLM ref;
  TabularLM aligned;
  RewardSpec reward;
  double beta;
};

// Bigram SFT (alpha 0.1) on the synthetic corpus, band [4, 6], beta 0.1,
// max_len 8, with the exact aligned model from the lattice route.
LengthRewardFixture length_reward_fixture(std::uint64_t seed = 2024, std::size_t sentences = 4000);

}  // namespace dera
