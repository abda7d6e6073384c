#include "dera/eval.hpp"

#include <cmath>
#include <future>
#include <ostream>
#include <sstream>

#include "dera/error.hpp"
#include "dera/format.hpp"
#include "dera/logmath.hpp"
#include "dera/model_io.hpp"
#include "dera/sampling.hpp"
#include "json.hpp"

namespace dera {
namespace {

using nlohmann::json;

void check_response(const Vocab& vocab, std::size_t max_len, const Sequence& y) {
  y.validate(vocab);
  if (!y.terminated(vocab.eos())) fail(Errc::InvalidArgument, "response must end with eos");
  if (y.response_length(vocab.eos()) > max_len) fail(Errc::InvalidArgument, "response longer than max_len");
}

Sequence sequence_from_json(const json& j, const Vocab& vocab) {
  if (!j.is_array()) fail(Errc::Parse, "responses are arrays of token ids");
  std::vector<TokenId> ids;
  for (const auto& x : j) {
    if (!x.is_number_integer() || x.get<long long>() < 0 || x.get<unsigned long long>() >= vocab.size()) {
      fail(Errc::Parse, "token id out of range in preference pair");
    }
    ids.push_back(x.get<TokenId>());
  }
  Sequence y(std::move(ids));
  if (!y.terminated(vocab.eos())) fail(Errc::Parse, "preference responses must end with eos");
  return y;
}

double normalized(double logprob, const Sequence& y) { return logprob / static_cast<double>(y.size()); }

}  // namespace

std::vector<PreferencePair> read_preference_pairs(const std::filesystem::path& path, const Vocab& vocab) {
  std::istringstream in(read_text_file(path));
  std::vector<PreferencePair> pairs;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.string() + ":" + std::to_string(lineno) + ": ";
    try {
      const json j = json::parse(line);
      PreferencePair p;
      p.query = j.at("query").get<QueryId>();
      p.y_w = sequence_from_json(j.at("chosen"), vocab);
      p.y_l = sequence_from_json(j.at("rejected"), vocab);
      if (p.y_w == p.y_l) fail(Errc::Parse, "chosen and rejected responses are identical");
      pairs.push_back(std::move(p));
    } catch (const json::exception& e) {
      fail(Errc::Parse, where + e.what());
    } catch (const Error& e) {
      fail(Errc::Parse, where + e.what());
    }
  }
  return pairs;
}

void write_preference_pairs(const std::filesystem::path& path, std::span<const PreferencePair> pairs) {
  std::string text;
  for (const auto& p : pairs) {
    nlohmann::ordered_json j;
    j["query"] = p.query;
    j["chosen"] = std::vector<TokenId>(p.y_w.tokens().begin(), p.y_w.tokens().end());
    j["rejected"] = std::vector<TokenId>(p.y_l.tokens().begin(), p.y_l.tokens().end());
    text += j.dump() + "\n";
  }
  write_text_file(path, text);
}

double dera_sequence_logprob(const TabularLM& ref, std::span<const TabularLM> aligned, const RealignConfig& cfg,
                             QueryId query, const Sequence& y) {
  check_response(ref.vocab(), ref.max_len(), y);
  double total = 0.0;
  const auto tokens = y.tokens();
  // The eos forced at depth max_len has probability one.
  const std::size_t steps = std::min(tokens.size(), ref.max_len());
  for (std::size_t t = 0; t < steps; ++t) {
    const auto prefix = tokens.first(t);
    BlendInput input{ref.logits(query, prefix), {}};
    for (const auto& a : aligned) input.aligned.push_back(a.logits(query, prefix));
    LogitVector h = aligned.empty() ? input.ref : blend(input, cfg);
    if (!cfg.controls.is_identity()) h = apply_decoding_controls(h, cfg.controls);
    total += log_softmax(h)[tokens[t]];
  }
  return total;
}

double sequence_logprob(const TabularLM& model, QueryId query, const Sequence& y) {
  return dera_sequence_logprob(model, {}, RealignConfig{}, query, y);
}

double pairwise_accuracy(const SequenceScorer& score, std::span<const PreferencePair> pairs) {
  if (pairs.empty()) fail(Errc::EmptyDataset, "pairwise accuracy needs at least one preference pair");
  std::size_t wins = 0;
  for (const auto& p : pairs) {
    if (normalized(score(p.query, p.y_w), p.y_w) > normalized(score(p.query, p.y_l), p.y_l)) ++wins;
  }
  return static_cast<double>(wins) / static_cast<double>(pairs.size());
}

double pairwise_accuracy(const TabularLM& model, std::span<const PreferencePair> pairs) {
  return pairwise_accuracy([&](QueryId q, const Sequence& y) { return sequence_logprob(model, q, y); }, pairs);
}

ExactRewardJudge::ExactRewardJudge(RewardSpec reward, TokenId eos, std::uint64_t seed)
    : reward_(std::move(reward)), eos_(eos), rng_(seed) {}

Verdict ExactRewardJudge::judge(QueryId query, const Sequence& a, const Sequence& b) {
  const double ra = reward_(query, a, eos_);
  const double rb = reward_(query, b, eos_);
  if (ra != rb) return ra > rb ? Verdict::A : Verdict::B;
  return rng_.coin() ? Verdict::A : Verdict::B;
}

double win_rate(std::span<const Response> a, std::span<const Response> b, Judge& judge, std::uint64_t seed) {
  if (a.size() != b.size()) fail(Errc::InvalidArgument, "win_rate needs equal sample counts");
  if (a.empty()) fail(Errc::EmptyDataset, "win_rate needs at least one pair");
  Rng coin(seed);
  std::size_t wins = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].query != b[i].query) fail(Errc::InvalidArgument, "paired samples answer different queries");
    const bool swapped = coin.coin();
    Verdict v;
    try {
      v = swapped ? judge.judge(a[i].query, b[i].y, a[i].y) : judge.judge(a[i].query, a[i].y, b[i].y);
    } catch (const Error& e) {
      throw Error(Errc::Judge, "judge failed on pair " + std::to_string(i) + ": " + e.what(), e.code());
    } catch (const std::exception& e) {
      throw Error(Errc::Judge, "judge failed on pair " + std::to_string(i) + ": " + e.what());
    }
    if ((v == Verdict::A) != swapped) ++wins;
  }
  return static_cast<double>(wins) / static_cast<double>(a.size());
}

std::vector<Response> sample_responses(const TabularLM& ref, std::span<const TabularLM> aligned,
                                       const RealignConfig& cfg, std::span<const QueryId> queries,
                                       std::size_t count, std::uint64_t seed) {
  if (queries.empty()) fail(Errc::InvalidArgument, "sampling needs at least one query");
  TabularProvider ref_p(std::make_shared<const TabularLM>(ref), "ref");
  std::vector<TabularProvider> al;
  for (std::size_t i = 0; i < aligned.size(); ++i) {
    al.emplace_back(std::make_shared<const TabularLM>(aligned[i]), "aligned" + std::to_string(i));
  }
  std::vector<LogitProvider*> ptrs;
  for (auto& p : al) ptrs.push_back(&p);

  std::vector<Response> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    RealignConfig c = cfg;
    c.seed = derive_seed(seed, i);
    c.max_len = ref.max_len();
    const QueryId q = queries[i % queries.size()];
    out.push_back({q, generate(ref_p, ptrs, q, c)});
  }
  return out;
}

std::vector<PreferencePair> synthesize_preference_pairs(const TabularLM& ref, const RewardSpec& reward,
                                                        std::span<const QueryId> queries, std::size_t count,
                                                        std::uint64_t seed) {
  if (queries.empty()) fail(Errc::InvalidArgument, "pair synthesis needs at least one query");
  constexpr std::size_t kMaxAttempts = 1000;
  RealignConfig cfg;
  cfg.lambda = 0.0;
  const TokenId eos = ref.vocab().eos();
  std::vector<PreferencePair> pairs;
  std::uint64_t draw = 0;
  for (std::size_t i = 0; i < count; ++i) {
    const QueryId q = queries[i % queries.size()];
    const QueryId qs[] = {q};
    bool found = false;
    for (std::size_t attempt = 0; attempt < kMaxAttempts && !found; ++attempt) {
      const auto ys = sample_responses(ref, {}, cfg, qs, 2, derive_seed(seed, draw++));
      const double r0 = reward(q, ys[0].y, eos);
      const double r1 = reward(q, ys[1].y, eos);
      if (ys[0].y == ys[1].y || r0 == r1) continue;
      pairs.push_back(r0 > r1 ? PreferencePair{q, ys[0].y, ys[1].y} : PreferencePair{q, ys[1].y, ys[0].y});
      found = true;
    }
    if (!found) {
      fail(Errc::InvalidArgument, "could not draw two responses with different rewards for query " +
                                      std::to_string(q));
    }
  }
  return pairs;
}

std::vector<SweepRecord> run_sweep(const TabularLM& ref, const TabularLM& aligned, const RewardSpec& reward,
                                   double beta, const SweepOptions& options) {
  if (options.samples < 1) fail(Errc::InvalidArgument, "sweep needs at least one sample per lambda");
  TradeoffOptions topt;
  topt.queries = options.queries;
  topt.controls = options.controls;
  topt.route = options.route;
  // Validates the grid, beta, reward and models before any sampling.
  const std::vector<TradeoffPoint> exact = tradeoff_curve(ref, aligned, reward, beta, options.grid, topt);

  const std::size_t n_grid = options.grid.size();
  const TabularLM aligned_models[] = {aligned};
  const auto config_at = [&](double lambda) {
    RealignConfig cfg;
    cfg.beta = beta;
    cfg.lambda = lambda;
    cfg.controls = options.controls;
    cfg.max_len = ref.max_len();
    return cfg;
  };

  const std::vector<Response> baseline = sample_responses(
      ref, aligned_models, config_at(options.baseline_lambda), options.queries, options.samples,
      derive_seed(options.seed, n_grid));
  const std::vector<PreferencePair> pairs =
      !options.pairs.empty() ? options.pairs
                             : synthesize_preference_pairs(ref, reward, options.queries, options.synthesized_pairs,
                                                           derive_seed(options.seed, n_grid + 1));

  const TokenId eos = ref.vocab().eos();
  const auto evaluate = [&](std::size_t index) {
    const double lambda = options.grid[index];
    const std::uint64_t sub = derive_seed(options.seed, index);
    const RealignConfig cfg = config_at(lambda);
    const auto ys = sample_responses(ref, aligned_models, cfg, options.queries, options.samples, derive_seed(sub, 0));

    SweepRecord rec;
    rec.lambda = lambda;
    rec.samples = ys.size();
    rec.length_histogram.assign(ref.max_len() + 1, 0);
    double sum = 0.0, sum_sq = 0.0, kl = 0.0;
    for (const auto& s : ys) {
      const double r = reward(s.query, s.y, eos);
      sum += r;
      sum_sq += r * r;
      kl += dera_sequence_logprob(ref, aligned_models, cfg, s.query, s.y) - sequence_logprob(ref, s.query, s.y);
      ++rec.length_histogram[s.y.response_length(eos)];
    }
    const double n = static_cast<double>(ys.size());
    rec.mean_reward = sum / n;
    rec.reward_std = std::sqrt(std::max(0.0, sum_sq / n - rec.mean_reward * rec.mean_reward));
    rec.kl_to_ref = kl / n;

    ExactRewardJudge judge(reward, eos, derive_seed(sub, 1));
    rec.win_rate = win_rate(ys, baseline, judge, derive_seed(sub, 2));
    rec.pairwise_accuracy = pairwise_accuracy(
        [&](QueryId q, const Sequence& y) { return dera_sequence_logprob(ref, aligned_models, cfg, q, y); }, pairs);
    rec.exact = exact[index];
    return rec;
  };

  std::vector<std::future<SweepRecord>> futures;
  for (std::size_t i = 0; i < n_grid; ++i) futures.push_back(std::async(std::launch::async, evaluate, i));
  std::vector<SweepRecord> records;
  for (auto& f : futures) records.push_back(f.get());
  return records;
}

void write_sweep_csv(std::ostream& out, std::span<const SweepRecord> records) {
  out << "lambda,effective_strength,samples,mean_reward,reward_std,kl_to_ref,win_rate,pairwise_accuracy,"
         "exact_reward,exact_kl,dera_exact_reward,dera_exact_kl,approx_gap,length_histogram,exact_length_dist\n";
  for (const auto& r : records) {
    const auto& e = r.exact;
    out << format_double(r.lambda) << ',' << format_double(e.effective_strength) << ',' << r.samples << ','
        << format_double(r.mean_reward) << ',' << format_double(r.reward_std) << ',' << format_double(r.kl_to_ref)
        << ',' << format_double(r.win_rate) << ',' << format_double(r.pairwise_accuracy) << ','
        << format_double(e.expected_reward_exact) << ',' << format_double(e.kl_ref_exact) << ','
        << format_double(e.expected_reward_dera) << ',' << format_double(e.kl_ref_dera) << ','
        << format_double(e.approx_gap) << ',';
    for (std::size_t n = 0; n < r.length_histogram.size(); ++n) {
      out << (n ? "|" : "") << n << ':' << r.length_histogram[n];
    }
    out << ',';
    for (std::size_t n = 0; n < e.length_dist_exact.size(); ++n) {
      out << (n ? "|" : "") << n << ':' << format_double(e.length_dist_exact[n]);
    }
    out << '\n';
  }
}

std::string sweep_gnuplot_script(const std::string& csv_path) {
  return "set datafile separator ','\n"
         "set key autotitle columnhead left top\n"
         "set xlabel 'lambda'\n"
         "set ylabel 'expected reward'\n"
         "plot '" + csv_path + "' using 1:4 with linespoints title 'DeRa (sampled)', \\\n"
         "     '' using 1:11 with linespoints title 'DeRa (exact)', \\\n"
         "     '' using 1:9 with linespoints title 'optimum at beta/lambda'\n";
}

}  // namespace dera
