// Acceptance run: one PASS/FAIL line per criterion, exit status 0 only when
// all of them hold. Reference values are recomputed here from first
// principles where that is cheap (geometric mixtures, closed-form optima,
// objectives) rather than taken from the library under test.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "dera/bridge.hpp"
#include "dera/error.hpp"
#include "dera/eval.hpp"
#include "dera/fixtures.hpp"
#include "dera/format.hpp"
#include "dera/logmath.hpp"
#include "dera/oracle.hpp"
#include "dera/realign.hpp"
#include "dera/model_io.hpp"
#include "dera/sampling.hpp"
#include "naive.hpp"
#include "tempdir.hpp"

using namespace dera;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kPathGrid[] = {0.0, 0.25, 0.5, 1.0, 2.0, 5.0, 10.0};
constexpr double kIdentityLambdas[] = {0.25, 0.5, 1.0, 2.0, 5.0, 10.0};

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", x);
  return buf;
}

// The 100 instances shared by criteria 2 to 6: V <= 4, max_len <= 4,
// beta = 0.1, aligned model = exact optimum turned into conditionals.
struct Instance {
  RandomInstance inst;
  SequenceDistribution ref_d;
  TabularLM aligned;
  SequenceDistribution aligned_d;
};

const std::vector<Instance>& instances() {
  static const std::vector<Instance> all = [] {
    std::vector<Instance> v;
    for (std::uint64_t s = 0; s < 100; ++s) {
      RandomInstance inst = random_instance(derive_seed(2024, s));
      SequenceDistribution ref_d = enumerate_dist(inst.ref, 0);
      TabularLM aligned = conditionals_of(align_exact(ref_d, inst.reward, inst.beta));
      SequenceDistribution aligned_d = enumerate_dist(aligned, 0);
      v.push_back({std::move(inst), std::move(ref_d), std::move(aligned), std::move(aligned_d)});
    }
    return v;
  }();
  return all;
}

std::vector<double> rewards_of(const Instance& in) {
  std::vector<double> r;
  for (const Sequence& y : in.ref_d.support()) r.push_back(in.inst.reward(0, y, in.ref_d.vocab().eos()));
  return r;
}

// log ref(y) + r(y)/strength, normalized: computed directly.
std::vector<double> naive_optimum_logprobs(const Instance& in, double strength) {
  const auto r = rewards_of(in);
  std::vector<double> w(r.size());
  double m = -kInf;
  for (std::size_t i = 0; i < w.size(); ++i) {
    w[i] = in.ref_d.logprob(i) + r[i] / strength;
    m = std::max(m, w[i]);
  }
  double z = 0.0;
  for (double x : w) z += std::exp(x - m);
  for (double& x : w) x -= m + std::log(z);
  return w;
}

double objective(const std::vector<double>& pi, const Instance& in, const std::vector<double>& r) {
  double value = 0.0;
  for (std::size_t i = 0; i < pi.size(); ++i) {
    if (pi[i] == 0.0) continue;
    value += pi[i] * r[i] - in.inst.beta * pi[i] * (std::log(pi[i]) - in.ref_d.logprob(i));
  }
  return value;
}

// ---------------------------------------------------------------------------

Outcome geometric_mixture() {
  Rng rng(1);
  double worst = 0.0;
  for (int trial = 0; trial < 10000; ++trial) {
    const std::size_t v = 2 + rng.below(15);
    const double lambda = 10.0 * rng.uniform();
    const double scale = 0.5 + 4.0 * rng.uniform();
    std::vector<double> ref(v), al(v);
    for (std::size_t i = 0; i < v; ++i) {
      ref[i] = scale * standard_normal(rng);
      al[i] = scale * standard_normal(rng);
    }
    // Masks: aligned-only, or both; the reference keeps at least one token
    // that the aligned model also keeps.
    for (std::size_t i = 1; i < v; ++i) {
      const double u = rng.uniform();
      if (u < 0.1) al[i] = kMasked;
      else if (u < 0.15) ref[i] = al[i] = kMasked;
    }
    const std::vector<double> p = naive::probs(ref), q = naive::probs(al);
    std::vector<double> w(v, -kInf);
    double m = -kInf;
    for (std::size_t i = 0; i < v; ++i) {
      if (p[i] == 0.0 || (lambda > 0.0 && q[i] == 0.0)) continue;
      w[i] = (1.0 - lambda) * std::log(p[i]) + (lambda > 0.0 ? lambda * std::log(q[i]) : 0.0);
      m = std::max(m, w[i]);
    }
    std::vector<double> mix(v, 0.0);
    double z = 0.0;
    for (std::size_t i = 0; i < v; ++i) z += mix[i] = std::isinf(w[i]) ? 0.0 : std::exp(w[i] - m);
    for (double& x : mix) x /= z;
    const NextTokenDistribution got = softmax(blend_logits(LogitVector(ref), LogitVector(al), lambda));
    worst = std::max(worst, naive::tv(std::vector<double>(got.probs().begin(), got.probs().end()), mix));
  }
  return {worst <= 1e-12, "max TV " + fmt(worst) + " over 10^4 triples"};
}

Outcome realignment_identity() {
  double worst = 0.0;
  for (const Instance& in : instances()) {
    for (double lambda : kIdentityLambdas) {
      const SequenceDistribution got = realigned_exact(in.ref_d, in.aligned_d, lambda);
      const auto want = naive_optimum_logprobs(in, in.inst.beta / lambda);
      for (std::size_t i = 0; i < want.size(); ++i) worst = std::max(worst, std::abs(got.logprob(i) - want[i]));
    }
  }
  return {worst <= 1e-9, "max per-sequence log-prob deviation " + fmt(worst)};
}

Outcome reward_residual() {
  double worst = 0.0;
  for (const Instance& in : instances()) {
    worst = std::max(worst, scaled_reward_residual(in.ref_d, in.aligned_d, in.inst.reward, in.inst.beta));
  }
  return {worst <= 1e-9, "max residual " + fmt(worst)};
}

Outcome optimality() {
  std::size_t violations = 0;
  double closest = kInf;
  Rng rng(4);
  for (const Instance& in : instances()) {
    const auto r = rewards_of(in);
    std::vector<double> opt(in.aligned_d.size());
    for (std::size_t i = 0; i < opt.size(); ++i) opt[i] = std::exp(in.aligned_d.logprob(i));
    const double best = objective(opt, in, r);
    for (int k = 0; k < 1000; ++k) {
      const double other = objective(random_simplex(rng, opt.size()), in, r);
      const double margin = best - other;
      closest = std::min(closest, margin);
      if (!(margin > 0.0) && std::abs(margin) > 1e-9) ++violations;
    }
  }
  return {violations == 0, std::to_string(violations) + " violations, smallest margin " + fmt(closest)};
}

Outcome endpoints() {
  double worst_end = 0.0, worst_single = 0.0;
  TradeoffOptions o;
  o.route = OracleRoute::Enumerate;
  const double ends[] = {0.0, 1.0};
  for (const Instance& in : instances()) {
    for (const auto& p : tradeoff_curve(in.inst.ref, in.aligned, in.inst.reward, in.inst.beta, ends, o)) {
      worst_end = std::max(worst_end, std::abs(p.approx_gap));
    }
  }
  RandomInstanceOptions single;
  single.min_len = single.max_len = 1;
  for (std::uint64_t s = 0; s < 100; ++s) {
    const RandomInstance inst = random_instance(derive_seed(77, s), single);
    const TabularLM aligned = conditionals_of(align_exact(enumerate_dist(inst.ref, 0), inst.reward, inst.beta));
    for (const auto& p : tradeoff_curve(inst.ref, aligned, inst.reward, inst.beta, kPathGrid, o)) {
      worst_single = std::max(worst_single, std::abs(p.approx_gap));
    }
  }
  return {worst_end <= 1e-12 && worst_single <= 1e-12,
          "gap at lambda 0/1 " + fmt(worst_end) + ", single-step max gap " + fmt(worst_single)};
}

Outcome monotonicity() {
  double reward_drop = 0.0, kl_drop = 0.0;
  TradeoffOptions o;
  o.route = OracleRoute::Enumerate;
  for (const Instance& in : instances()) {
    const auto curve = tradeoff_curve(in.inst.ref, in.aligned, in.inst.reward, in.inst.beta, kPathGrid, o);
    for (std::size_t i = 1; i < curve.size(); ++i) {
      reward_drop = std::max(reward_drop, curve[i - 1].expected_reward_exact - curve[i].expected_reward_exact);
      kl_drop = std::max(kl_drop, curve[i - 1].kl_ref_exact - curve[i].kl_ref_exact);
    }
  }
  // Rounding only: both series are mathematically non-decreasing.
  return {reward_drop <= 1e-12 && kl_drop <= 1e-12,
          "largest decrease: reward " + fmt(reward_drop) + ", KL " + fmt(kl_drop)};
}

Outcome length_reward_sweep() {
  const LengthRewardFixture fx = length_reward_fixture();
  SweepOptions o;
  o.grid = {0.0, 0.5, 1.0, 2.0};
  o.samples = 10000;
  o.seed = 2024;
  const auto records = run_sweep(fx.ref, fx.aligned, fx.reward, fx.beta, o);

  bool a = true, b = true, c = true;
  double prev_band = -1.0;
  std::ostringstream detail;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    const double exact = r.exact.expected_reward_exact;
    if (i > 0) {
      const double before = records[i - 1].exact.expected_reward_exact;
      const bool saturated = before >= -1e-6;
      a = a && (saturated ? exact >= -1e-6 : exact > before);
    }
    const double sigma = std::sqrt(r.exact.reward_variance_dera / static_cast<double>(r.samples));
    b = b && std::abs(r.mean_reward - r.exact.expected_reward_dera) <= 3.0 * sigma;
    double band = 0.0;
    for (std::size_t n = fx.reward.band().l_min; n <= fx.reward.band().l_max; ++n) band += r.exact.length_dist_exact[n];
    c = c && band >= prev_band;
    prev_band = band;
    detail << (i ? "; " : "") << "lambda " << fmt(r.lambda) << ": exact " << fmt(exact) << ", DeRa "
           << fmt(r.mean_reward) << " vs " << fmt(r.exact.expected_reward_dera) << " (3 sigma " << fmt(3 * sigma)
           << "), in band " << fmt(band);
  }
  return {a && b && c, std::string("(a) ") + (a ? "ok" : "no") + " (b) " + (b ? "ok" : "no") + " (c) " +
                           (c ? "ok" : "no") + ": " + detail.str()};
}

Outcome sampling_consistency() {
  Rng rng(8);
  const Vocab v = toy_vocab(3);
  const TabularLM ref = random_model(rng, v, 2, 3, 1.5);
  const TabularLM al = random_model(rng, v, 2, 3, 1.5);
  RealignConfig cfg;
  cfg.lambda = 0.5;
  cfg.max_len = 3;
  const SequenceDistribution d = dera_sequence_dist(ref, al, cfg);
  const TabularLM aligned[] = {al};
  const QueryId q[] = {0};
  constexpr std::size_t n = 100000;
  std::map<Sequence, double> freq;
  for (const auto& r : sample_responses(ref, aligned, cfg, q, n, 8)) freq[r.y] += 1.0 / n;
  double tv = 0.0;
  for (std::size_t i = 0; i < d.size(); ++i) tv += std::abs(d.prob(i) - freq[d.support()[i]]);
  tv *= 0.5;
  return {tv <= 0.02, "TV " + fmt(tv) + " over 10^5 samples"};
}

// Model files for the wire stub.
class ModelDir {
 public:
  std::string write(const TabularLM& m, const std::string& name) {
    write_vocab(dir_ / (name + ".vocab"), m.vocab());
    write_model(dir_ / (name + ".json"), m, name + ".vocab");
    return (dir_ / (name + ".json")).string();
  }

 private:
  TempDir dir_{"acceptance"};
};

Outcome bridge_differential() {
  struct Scenario {
    std::uint64_t model_seed;
    double lambda;
    DecodingControls controls;
    bool pipeline;
    bool wire_ref;
  };
  std::vector<Scenario> scenarios;
  for (std::uint64_t s = 0; s < 20; ++s) {
    DecodingControls c;
    if (s % 4 == 1) c.temperature = 0.6;
    if (s % 4 == 2) c.top_k = 2;
    if (s % 4 == 3) c.top_p = 0.8;
    scenarios.push_back({s, 0.5 * static_cast<double>(s % 7), c, s % 2 == 0, s % 3 != 0});
  }
  ModelDir dir;
  std::size_t identical = 0;
  std::string first_problem;
  for (std::size_t k = 0; k < scenarios.size(); ++k) {
    const Scenario& sc = scenarios[k];
    Rng rng(sc.model_seed);
    const std::size_t vsize = 3 + sc.model_seed % 3;
    const auto ref = std::make_shared<const TabularLM>(random_model(rng, toy_vocab(vsize), 1, 4, 2.0));
    const auto al = std::make_shared<const TabularLM>(random_model(rng, toy_vocab(vsize), 2, 4, 2.0));
    const std::string ref_path = dir.write(*ref, "ref" + std::to_string(k));
    const std::string al_path = dir.write(*al, "al" + std::to_string(k));
    const std::string flags = sc.pipeline ? " --pipeline" : "";
    try {
      auto wire_al = open_provider("pipe:" + std::string(DERA_STUB_PATH) + " --model " + al_path + flags);
      std::unique_ptr<LogitProvider> wire_ref;
      TabularProvider local_ref(ref), local_al(al);
      LogitProvider* wref = &local_ref;
      if (sc.wire_ref) {
        wire_ref = open_provider("pipe:" + std::string(DERA_STUB_PATH) + " --model " + ref_path + flags);
        wref = wire_ref.get();
      }
      LogitProvider* wal[] = {wire_al.get()};
      LogitProvider* lal[] = {&local_al};
      bool same = true;
      for (std::uint64_t seed = 0; seed < 25; ++seed) {
        RealignConfig cfg;
        cfg.lambda = sc.lambda;
        cfg.controls = sc.controls;
        cfg.seed = derive_seed(k, seed);
        cfg.max_len = 4;
        same = same && generate(*wref, wal, 0, cfg) == generate(local_ref, lal, 0, cfg);
      }
      identical += same;
      if (!same && first_problem.empty()) first_problem = "scenario " + std::to_string(k) + " differs";
    } catch (const Error& e) {
      if (first_problem.empty()) first_problem = "scenario " + std::to_string(k) + ": " + e.what();
    }
  }
  return {identical == scenarios.size(), std::to_string(identical) + "/20 scenarios byte-identical" +
                                             (first_problem.empty() ? "" : " (" + first_problem + ")")};
}

bool bit_identical(const LogitVector& a, const LogitVector& b) {
  return a.size() == b.size() && std::memcmp(a.values().data(), b.values().data(), a.size() * sizeof(double)) == 0;
}

Outcome multi_reward() {
  Rng rng(10);
  const Vocab v = toy_vocab(4);
  const TabularLM ref = random_model(rng, v, 2, 3, 2.0);
  const TabularLM a1 = random_model(rng, v, 2, 3, 2.0);
  const TabularLM a2 = random_model(rng, v, 1, 3, 2.0);
  double worst = 0.0;
  for (const Sequence& y : naive::all_responses(v, 3)) {
    for (std::size_t k = 0; k < std::min<std::size_t>(y.size(), 3); ++k) {
      const auto prefix = y.tokens().first(k);
      const LogitVector rows[] = {a1.logits(0, prefix), a2.logits(0, prefix)};
      for (int i = 0; i < 2; ++i) {
        const double e[] = {i == 0 ? 1.0 : 0.0, i == 1 ? 1.0 : 0.0};
        const auto got = naive::probs(blend_multi(ref.logits(0, prefix), rows, e));
        worst = std::max(worst, naive::tv(got, naive::probs(rows[i])));
      }
    }
  }
  std::size_t mismatches = 0;
  for (int trial = 0; trial < 10000; ++trial) {
    const std::size_t n = 2 + rng.below(30);
    std::vector<double> r(n), a(n);
    for (std::size_t i = 0; i < n; ++i) {
      r[i] = 3.0 * standard_normal(rng);
      a[i] = rng.uniform() < 0.1 && i > 0 ? kMasked : 3.0 * standard_normal(rng);
    }
    const double lambda[] = {trial % 10 == 0 ? 0.0 : 10.0 * rng.uniform()};
    const LogitVector al[] = {LogitVector(a)};
    mismatches += !bit_identical(blend_multi(LogitVector(r), al, lambda), blend_logits(LogitVector(r), al[0], lambda[0]));
  }
  return {worst <= 1e-12 && mismatches == 0,
          "max TV at unit weights " + fmt(worst) + ", K=1 bit mismatches " + std::to_string(mismatches) + "/10^4"};
}

Outcome metric_sanity() {
  const LengthRewardFixture fx = length_reward_fixture();
  const QueryId q[] = {0};
  RealignConfig cfg;
  cfg.lambda = 0.0;
  const auto a = sample_responses(fx.ref, {}, cfg, q, 10000, 31);
  const auto b = sample_responses(fx.ref, {}, cfg, q, 10000, 32);
  ExactRewardJudge judge(fx.reward, fx.ref.vocab().eos(), 33);
  const double w = win_rate(a, b, judge, 34);

  Rng rng(12);
  const TabularLM m = random_model(rng, toy_vocab(3), 2, 3, 2.0);
  std::vector<PreferencePair> pairs;
  const auto all = naive::all_responses(m.vocab(), 3);
  for (const auto& x : all) {
    for (const auto& y : all) {
      const double sx = std::log(naive::sequence_prob(m, 0, x)) / static_cast<double>(x.size());
      const double sy = std::log(naive::sequence_prob(m, 0, y)) / static_cast<double>(y.size());
      if (sx > sy + 1e-9) pairs.push_back({0, x, y});
    }
  }
  const double acc = pairwise_accuracy(m, pairs);
  return {std::abs(w - 0.5) <= 0.02 && acc == 1.0,
          "win_rate(a,a) " + fmt(w) + " over 10^4 pairs, pairwise accuracy " + fmt(acc) + " on " +
              std::to_string(pairs.size()) + " pairs"};
}

}  // namespace

int main() {
  struct Criterion {
    const char* name;
    std::function<Outcome()> run;
    double budget_seconds;
  };
  const Criterion criteria[] = {
      {"token-level geometric mixture", geometric_mixture, 5},
      {"realignment identity", realignment_identity, 30},
      {"scaled reward residual", reward_residual, 30},
      {"closed-form optimality", optimality, 60},
      {"endpoint recovery", endpoints, 60},
      {"monotonicity", monotonicity, 60},
      {"length-reward sweep", length_reward_sweep, 120},
      {"sampling consistency", sampling_consistency, 60},
      {"bridge differential", bridge_differential, 60},
      {"multi-reward blending", multi_reward, 60},
      {"metric sanity", metric_sanity, 60},
  };
  int failures = 0;
  int index = 0;
  for (const auto& c : criteria) {
    ++index;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool in_time = secs <= c.budget_seconds;
    const bool pass = o.pass && in_time;
    failures += !pass;
    std::printf("%s %2d %s: %s [%.2fs, budget %.0fs%s]\n", pass ? "PASS" : "FAIL", index, c.name, o.detail.c_str(),
                secs, c.budget_seconds, in_time ? "" : ", over budget");
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
