#include <cmath>
#include <map>
#include <memory>

#include "doctest.h"
#include "dera/error.hpp"
#include "dera/fixtures.hpp"
#include "dera/logmath.hpp"
#include "dera/oracle.hpp"
#include "dera/sampling.hpp"
#include "naive.hpp"

using namespace dera;

namespace {

std::shared_ptr<const TabularLM> shared(TabularLM m) { return std::make_shared<const TabularLM>(std::move(m)); }

// Serves a fixed model but throws at a chosen step.
class FlakyProvider final : public LogitProvider {
 public:
  FlakyProvider(std::shared_ptr<const TabularLM> m, std::size_t fail_at, Errc code)
      : inner_(std::move(m), "flaky"), fail_at_(fail_at), code_(code) {}
  const ProviderInfo& info() const override { return inner_.info(); }
  LogitVector next_logits(QueryId q, std::span<const TokenId> prefix) override {
    if (prefix.size() == fail_at_) fail(code_, "injected failure");
    ++calls;
    return inner_.next_logits(q, prefix);
  }
  int calls = 0;

 private:
  TabularProvider inner_;
  std::size_t fail_at_;
  Errc code_;
};

RealignConfig config(double lambda, std::uint64_t seed, std::size_t max_len) {
  RealignConfig c;
  c.lambda = lambda;
  c.seed = seed;
  c.max_len = max_len;
  return c;
}

}  // namespace

TEST_CASE("tabular provider returns the exact table row") {
  Rng rng(1);
  const auto m = shared(random_model(rng, toy_vocab(4), 2, 3, 2.0));
  TabularProvider p(m);
  CHECK(p.info().vocab_size == 4);
  CHECK(p.info().eos == 3);
  for (const auto& [key, row] : m->rows()) CHECK(p.next_logits(0, key.context) == row);
}

TEST_CASE("dera_step at lambda 0 draws from the reference conditional") {
  const LogitVector ref({0.1, -0.3, 0.7});
  const LogitVector al({2.0, kMasked, -1.0});
  GenerationSession s(0, 2, config(0.0, 5, 4));
  const LogitVector aligned[] = {al};
  NextTokenDistribution seen({1.0, 0.0, 0.0});
  dera_step(s, ref, aligned, [&](std::size_t, const NextTokenDistribution& p, TokenId) { seen = p; });
  const auto expect = naive::probs(ref);
  for (int i = 0; i < 3; ++i) CHECK(seen[i] == doctest::Approx(expect[i]).epsilon(1e-15));
}

TEST_CASE("one-hot blend is deterministic and eos closes the session") {
  GenerationSession s(0, 2, config(0.5, 9, 4));
  const LogitVector aligned[] = {one_hot_logits(3, 2)};
  CHECK(dera_step(s, LogitVector({0.0, 0.0, 0.0}), aligned) == 2);
  CHECK(s.closed);
  CHECK(s.tokens == Sequence({2}));
  CHECK_THROWS_AS(dera_step(s, LogitVector({0.0, 0.0, 0.0}), aligned), Error);
}

TEST_CASE("max_len forces eos without a draw") {
  GenerationSession s(0, 1, config(1.0, 3, 2));
  const LogitVector aligned[] = {one_hot_logits(2, 0)};
  dera_step(s, uniform_logits(2), aligned);
  CHECK(!s.closed);
  dera_step(s, uniform_logits(2), aligned);
  CHECK(s.closed);
  CHECK(s.tokens == Sequence({0, 0, 1}));
  CHECK(s.steps == 2);

  Rng probe(3);
  probe.uniform();
  probe.uniform();
  CHECK(probe.next_u64() == s.rng.next_u64());
}

TEST_CASE("generate is reproducible and terminates") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const RandomInstance inst = random_instance(seed);
    const auto ref = shared(inst.ref);
    const auto al = shared(conditionals_of(align_exact(enumerate_dist(inst.ref, 0), inst.reward, inst.beta)));
    TabularProvider pr(ref), pa(al);
    LogitProvider* aligned[] = {&pa};
    for (std::uint64_t k = 0; k < 20; ++k) {
      const RealignConfig cfg = config(0.5, derive_seed(seed, k), inst.ref.max_len());
      const Sequence a = generate(pr, aligned, 0, cfg);
      const Sequence b = generate(pr, aligned, 0, cfg);
      CHECK(a == b);
      CHECK(a.terminated(inst.ref.vocab().eos()));
      CHECK(a.response_length(inst.ref.vocab().eos()) <= inst.ref.max_len());
      CHECK_NOTHROW(a.validate(inst.ref.vocab()));
    }
  }
}

TEST_CASE("aligned identical to reference gives reference sampling") {
  Rng rng(4);
  const auto m = shared(random_model(rng, toy_vocab(4), 1, 5, 2.0));
  TabularProvider a(m), b(m);
  LogitProvider* aligned[] = {&b};
  for (double lambda : {0.0, 0.5, 1.0, 2.0}) {
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
      const RealignConfig cfg = config(lambda, seed, 5);
      CHECK(generate(a, aligned, 0, cfg) == generate(a, {}, 0, cfg));
    }
  }
}

TEST_CASE("provider failures carry the step index and cause") {
  // Order 0 with all-equal logits except eos masked: every response runs to max_len.
  TabularLM no_eos(toy_vocab(3), 0, 4);
  no_eos.set_row(0, {}, LogitVector({0.0, 0.0, kMasked}));
  TabularProvider ref(shared(no_eos));
  FlakyProvider flaky(shared(no_eos), 2, Errc::ProviderTimeout);
  LogitProvider* aligned[] = {&flaky};
  try {
    generate(ref, aligned, 0, config(0.5, 1, 4));
    FAIL("expected a provider error");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::Provider);
    CHECK(e.cause() == Errc::ProviderTimeout);
    CHECK(std::string(e.what()).find("step 2") != std::string::npos);
  }
  CHECK(flaky.calls == 2);
}

TEST_CASE("incompatible providers are rejected") {
  TabularProvider a(shared(TabularLM(toy_vocab(3), 0, 2)));
  TabularProvider b(shared(TabularLM(toy_vocab(4), 0, 2)));
  LogitProvider* aligned[] = {&b};
  CHECK_THROWS_AS(generate(a, aligned, 0, config(0.5, 0, 2)), Error);
  RealignConfig multi = config(0.5, 0, 2);
  multi.lambda = std::vector<double>{0.5, 0.5};
  LogitProvider* one[] = {&a};
  try {
    generate(a, one, 0, multi);
    FAIL("expected Incompatible");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::Incompatible);
  }
}

TEST_CASE("empirical law matches dera_sequence_dist") {
  // V = 3, max_len = 3, lambda = 0.5, 1e5 samples.
  RandomInstanceOptions o;
  o.min_vocab = o.max_vocab = 3;
  o.min_len = o.max_len = 3;
  const RandomInstance inst = random_instance(77, o);
  const auto ref_lm = shared(inst.ref);
  Rng rng(78);
  const auto al_lm = shared(random_model(rng, inst.ref.vocab(), 2, 3, 2.0));
  TabularProvider pr(ref_lm), pa(al_lm);
  LogitProvider* aligned[] = {&pa};
  RealignConfig cfg = config(0.5, 0, 3);
  const SequenceDistribution exact = dera_sequence_dist(*ref_lm, *al_lm, cfg);

  std::map<Sequence, double> counts;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    cfg.seed = derive_seed(2024, static_cast<std::uint64_t>(i));
    counts[generate(pr, aligned, 0, cfg)] += 1.0;
  }
  double tv = 0.0;
  for (std::size_t i = 0; i < exact.size(); ++i) {
    const auto it = counts.find(exact.support()[i]);
    tv += std::abs((it == counts.end() ? 0.0 : it->second / n) - exact.prob(i));
  }
  tv *= 0.5;
  MESSAGE("TV = " << tv);
  CHECK(tv <= 0.02);
}

TEST_CASE("mean length moves toward the band as lambda grows") {
  const LengthRewardFixture f = length_reward_fixture();
  const auto ref = shared(f.ref), al = shared(f.aligned);
  TabularProvider pr(ref), pa(al);
  LogitProvider* aligned[] = {&pa};
  const double grid[] = {0.0, 0.5, 1.0, 2.0};
  const auto pts = tradeoff_curve(f.ref, f.aligned, f.reward, f.beta, grid);
  const int n = 10000;
  double prev_in_band = -1.0;
  for (std::size_t g = 0; g < 4; ++g) {
    double mean = 0.0, in_band = 0.0;
    for (int i = 0; i < n; ++i) {
      const RealignConfig cfg = config(grid[g], derive_seed(g, static_cast<std::uint64_t>(i)), 8);
      const std::size_t len = generate(pr, aligned, 0, cfg).response_length(11);
      mean += static_cast<double>(len) / n;
      in_band += (len >= 4 && len <= 6) ? 1.0 / n : 0.0;
    }
    double exact_mean = 0.0, var = 0.0;
    for (std::size_t l = 0; l < pts[g].length_dist_dera.size(); ++l) {
      exact_mean += static_cast<double>(l) * pts[g].length_dist_dera[l];
    }
    for (std::size_t l = 0; l < pts[g].length_dist_dera.size(); ++l) {
      var += pts[g].length_dist_dera[l] * (l - exact_mean) * (l - exact_mean);
    }
    MESSAGE("lambda " << grid[g] << " mean len " << mean << " exact " << exact_mean << " in band " << in_band);
    CHECK(std::abs(mean - exact_mean) <= 3.0 * std::sqrt(var / n) + 1e-12);
    CHECK(in_band > prev_in_band);
    prev_in_band = in_band;
  }
}
