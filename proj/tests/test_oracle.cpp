#include <algorithm>
#include <cmath>
#include <sstream>

#include "doctest.h"
#include "dera/error.hpp"
#include "dera/fixtures.hpp"
#include "dera/lattice.hpp"
#include "dera/logmath.hpp"
#include "dera/oracle.hpp"
#include "naive.hpp"

using namespace dera;

namespace {

template <class F>
Errc code_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected dera::Error");
  return Errc::InvalidArgument;
}

constexpr double kGrid[] = {0.0, 0.25, 0.5, 1.0, 2.0, 5.0, 10.0};

double max_logprob_gap(const SequenceDistribution& a, const SequenceDistribution& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double x = a.logprob(i), y = b.logprob(i);
    if (is_masked(x) || is_masked(y)) {
      if (is_masked(x) != is_masked(y)) return naive::kInf;
      continue;
    }
    worst = std::max(worst, std::abs(x - y));
  }
  return worst;
}

SequenceDistribution two_point(double p0) {
  const Vocab v({"a", "<eos>"}, 1);
  return SequenceDistribution(v, 0, 1, enumerate_support(v, 1), {std::log(p0), std::log(1.0 - p0)});
}

}  // namespace

TEST_CASE("realigned_exact examples") {
  const SequenceDistribution ref = two_point(0.5);
  const SequenceDistribution al = two_point(0.9);
  const SequenceDistribution r2 = realigned_exact(ref, al, 2.0);
  CHECK(std::abs(r2.prob(0) - 0.81 / 0.82) < 1e-15);
  CHECK(std::abs(r2.prob(1) - 0.01 / 0.82) < 1e-15);
  CHECK(max_logprob_gap(realigned_exact(ref, al, 0.0), ref) == 0.0);
  CHECK(max_logprob_gap(realigned_exact(ref, al, 1.0), al) < 1e-15);

  const Vocab other({"a", "b", "<eos>"}, 2);
  const SequenceDistribution wide(other, 0, 0, enumerate_support(other, 0), {0.0});
  CHECK(code_of([&] { realigned_exact(ref, wide, 0.5); }) == Errc::SupportMismatch);
}

TEST_CASE("realigning the optimum equals the optimum at beta/lambda") {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const RandomInstance inst = random_instance(seed);
    const SequenceDistribution ref = enumerate_dist(inst.ref, 0);
    const SequenceDistribution pi = align_exact(ref, inst.reward, inst.beta);
    for (double lambda : {0.25, 0.5, 1.0, 2.0, 5.0, 10.0}) {
      const double gap =
          max_logprob_gap(realigned_exact(ref, pi, lambda), align_exact(ref, inst.reward, inst.beta / lambda));
      CHECK(gap <= 1e-9);
    }
  }
}

TEST_CASE("scaled reward residual") {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const RandomInstance inst = random_instance(seed);
    const SequenceDistribution ref = enumerate_dist(inst.ref, 0);
    const SequenceDistribution pi = align_exact(ref, inst.reward, inst.beta);
    CHECK(scaled_reward_residual(ref, pi, inst.reward, inst.beta) <= 1e-9);
  }
  const RandomInstance inst = random_instance(3);
  const SequenceDistribution ref = enumerate_dist(inst.ref, 0);
  RewardTable zero;
  for (const auto& y : ref.support()) zero.entries[{0, y}] = 0.0;
  const SequenceDistribution same = align_exact(ref, RewardSpec::table(zero), 0.1);
  CHECK(scaled_reward_residual(ref, same, RewardSpec::table(zero), 0.1) == doctest::Approx(0.0).epsilon(1e-12));

  // A corrupted optimum violates the identity.
  std::vector<double> lp(same.logprobs().begin(), same.logprobs().end());
  lp[0] += 0.5;
  const auto bad = SequenceDistribution::from_log_weights(ref.vocab(), 0, ref.max_len(), ref.support(), lp);
  CHECK(scaled_reward_residual(ref, bad, RewardSpec::table(zero), 0.1) > 1e-3);
}

TEST_CASE("objective value") {
  const RandomInstance inst = random_instance(1);
  const SequenceDistribution ref = enumerate_dist(inst.ref, 0);
  CHECK(objective_value(ref, ref, inst.reward, inst.beta) == doctest::Approx(expected_reward(ref, inst.reward)));
  const SequenceDistribution pi = align_exact(ref, inst.reward, inst.beta);
  // With an overwhelming KL weight any departure from ref loses.
  CHECK(objective_value(pi, ref, inst.reward, 1e6) < objective_value(ref, ref, inst.reward, 1e6));
}

TEST_CASE("exact path is monotone in lambda") {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const RandomInstance inst = random_instance(seed);
    const SequenceDistribution ref = enumerate_dist(inst.ref, 0);
    double prev_r = -naive::kInf, prev_kl = -naive::kInf;
    for (double lambda : kGrid) {
      const SequenceDistribution p = lambda == 0.0 ? ref : align_exact(ref, inst.reward, inst.beta / lambda);
      const double r = expected_reward(p, inst.reward);
      const double kl = sequence_kl(p, ref);
      CHECK(r >= prev_r - 1e-12);
      CHECK(kl >= prev_kl - 1e-12);
      prev_r = r;
      prev_kl = kl;
    }
  }
}

TEST_CASE("dera_sequence_dist endpoints and single step") {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const RandomInstance inst = random_instance(seed);
    const SequenceDistribution ref = enumerate_dist(inst.ref, 0);
    const SequenceDistribution pi = align_exact(ref, inst.reward, inst.beta);
    const TabularLM aligned = conditionals_of(pi);
    RealignConfig cfg;
    cfg.lambda = 0.0;
    CHECK(max_logprob_gap(dera_sequence_dist(inst.ref, aligned, cfg), ref) == 0.0);
    cfg.lambda = 1.0;
    CHECK(max_logprob_gap(dera_sequence_dist(inst.ref, aligned, cfg), pi) < 1e-9);
  }

  RandomInstanceOptions one;
  one.min_len = one.max_len = 1;
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const RandomInstance inst = random_instance(seed, one);
    const SequenceDistribution ref = enumerate_dist(inst.ref, 0);
    const SequenceDistribution pi = align_exact(ref, inst.reward, inst.beta);
    const TabularLM aligned = conditionals_of(pi);
    for (double lambda : kGrid) {
      RealignConfig cfg;
      cfg.lambda = lambda;
      const auto dera = dera_sequence_dist(inst.ref, aligned, cfg);
      const auto exact = realigned_exact(ref, pi, lambda);
      CHECK(sequence_kl(exact, dera) <= 1e-12);
    }
  }
}

TEST_CASE("per-token blend is exact when the model and reward factorize") {
  // Fixed-length responses (eos masked before max_len), an order-0 reference
  // and a reward that sums per-position scores: the optimum is a product of
  // per-position tilts and the per-token geometric mixture is exact.
  const Vocab v({"a", "b", "c", "<eos>"}, 3);
  const std::size_t len = 3;
  TabularLM ref(v, 0, len);
  ref.set_row(0, {}, LogitVector({0.3, -0.4, 1.1, kMasked}));
  const double score[3][3] = {{0.2, -0.5, 0.1}, {-0.3, 0.4, 0.0}, {0.6, -0.1, -0.7}};

  const SequenceDistribution d = enumerate_dist(ref, 0);
  RewardTable table;
  for (const auto& y : d.support()) {
    double r = 0.0;
    if (y.response_length(3) == len) {
      for (std::size_t t = 0; t < len; ++t) r += score[t][static_cast<std::size_t>(y[t])];
    }
    table.entries[{0, y}] = r;
  }
  const RewardSpec reward = RewardSpec::table(table);
  const double beta = 0.5;
  const SequenceDistribution pi = align_exact(d, reward, beta);
  const TabularLM aligned = conditionals_of(pi);
  for (double lambda : {0.3, 0.5, 2.0, 4.0}) {
    RealignConfig cfg;
    cfg.lambda = lambda;
    CHECK(max_logprob_gap(dera_sequence_dist(ref, aligned, cfg), realigned_exact(d, pi, lambda)) < 1e-9);
  }
}

TEST_CASE("tradeoff curve properties") {
  const double beta = 0.1;
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const RandomInstance inst = random_instance(seed);
    const SequenceDistribution ref = enumerate_dist(inst.ref, 0);
    const TabularLM aligned = conditionals_of(align_exact(ref, inst.reward, beta));
    const auto pts = tradeoff_curve(inst.ref, aligned, inst.reward, beta, kGrid);
    REQUIRE(pts.size() == std::size(kGrid));
    CHECK(pts[0].expected_reward_exact == doctest::Approx(expected_reward(ref, inst.reward)));
    CHECK(std::abs(pts[0].kl_ref_exact) <= 1e-12);
    CHECK(std::abs(pts[0].approx_gap) <= 1e-12);
    CHECK(std::abs(pts[3].approx_gap) <= 1e-12);
    for (std::size_t i = 0; i < pts.size(); ++i) {
      CHECK(pts[i].approx_gap >= 0.0);
      CHECK(pts[i].kl_ref_exact >= 0.0);
      CHECK(pts[i].kl_ref_dera >= 0.0);
      if (i > 0) {
        CHECK(std::abs(pts[i].effective_strength * pts[i].lambda - beta) <= 1e-12);
        CHECK(pts[i].expected_reward_exact >= pts[i - 1].expected_reward_exact - 1e-12);
        CHECK(pts[i].kl_ref_exact >= pts[i - 1].kl_ref_exact - 1e-12);
      }
    }
  }
}

TEST_CASE("lattice and enumeration routes agree") {
  int checked = 0;
  for (std::uint64_t seed = 0; seed < 200 && checked < 25; ++seed) {
    const RandomInstance inst = random_instance(seed);
    if (!inst.reward.is_length_band()) continue;
    ++checked;
    const SequenceDistribution ref = enumerate_dist(inst.ref, 0);
    const TabularLM aligned = conditionals_of(align_exact(ref, inst.reward, inst.beta));

    // Exact optimum through the lattice equals the enumerated optimum.
    const QueryId q[] = {0};
    const TabularLM lat = align_exact_lattice(inst.ref, q, inst.reward, inst.beta);
    CHECK(max_logprob_gap(enumerate_dist(lat, 0), align_exact(ref, inst.reward, inst.beta)) < 1e-9);

    TradeoffOptions e, l;
    e.route = OracleRoute::Enumerate;
    l.route = OracleRoute::Lattice;
    const auto a = tradeoff_curve(inst.ref, aligned, inst.reward, inst.beta, kGrid, e);
    const auto b = tradeoff_curve(inst.ref, aligned, inst.reward, inst.beta, kGrid, l);
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i].expected_reward_exact == doctest::Approx(b[i].expected_reward_exact).epsilon(1e-9));
      CHECK(a[i].expected_reward_dera == doctest::Approx(b[i].expected_reward_dera).epsilon(1e-9));
      CHECK(std::abs(a[i].kl_ref_exact - b[i].kl_ref_exact) < 1e-9);
      CHECK(std::abs(a[i].kl_ref_dera - b[i].kl_ref_dera) < 1e-9);
      CHECK(std::abs(a[i].approx_gap - b[i].approx_gap) < 1e-9);
      CHECK(std::abs(a[i].reward_variance_dera - b[i].reward_variance_dera) < 1e-9);
      for (std::size_t n = 0; n < a[i].length_dist_dera.size(); ++n) {
        CHECK(std::abs(a[i].length_dist_dera[n] - b[i].length_dist_dera[n]) < 1e-9);
        CHECK(std::abs(a[i].length_dist_exact[n] - b[i].length_dist_exact[n]) < 1e-9);
      }
    }
  }
  CHECK(checked >= 10);
}

TEST_CASE("tradeoff csv") {
  const RandomInstance inst = random_instance(0);
  const SequenceDistribution ref = enumerate_dist(inst.ref, 0);
  const TabularLM aligned = conditionals_of(align_exact(ref, inst.reward, 0.1));
  const double grid[] = {0.0, 1.0};
  const auto pts = tradeoff_curve(inst.ref, aligned, inst.reward, 0.1, grid);
  std::ostringstream out;
  write_tradeoff_csv(out, pts);
  const std::string s = out.str();
  CHECK(s.rfind("lambda,effective_strength,expected_reward_exact,expected_reward_dera,kl_ref_exact,kl_ref_dera,"
                "approx_gap\n",
                0) == 0);
  CHECK(std::count(s.begin(), s.end(), '\n') == 3);
  CHECK(s.find("\n0,inf,") != std::string::npos);

  const double unsorted[] = {1.0, 0.5};
  CHECK(code_of([&] { tradeoff_curve(inst.ref, aligned, inst.reward, 0.1, unsorted); }) == Errc::BadLambda);
}

TEST_CASE("length reward fixture") {
  const LengthRewardFixture f = length_reward_fixture();
  CHECK(f.ref.vocab().size() == 12);
  CHECK(f.ref.max_len() == 8);
  const double grid[] = {0.0, 0.5, 1.0, 2.0};
  const auto pts = tradeoff_curve(f.ref, f.aligned, f.reward, f.beta, grid);
  for (const auto& p : pts) {
    double mass = 0.0;
    for (double x : p.length_dist_dera) mass += x;
    CHECK(mass == doctest::Approx(1.0).epsilon(1e-12));
    MESSAGE("lambda " << p.lambda << " E[r] exact " << p.expected_reward_exact << " dera " << p.expected_reward_dera
                      << " gap " << p.approx_gap);
  }
  CHECK(pts[1].expected_reward_exact > pts[0].expected_reward_exact);
  CHECK(std::abs(pts[2].approx_gap) < 1e-12);
}
