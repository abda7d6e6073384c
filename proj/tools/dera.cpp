// dera: build toy models, sample with decoding-time realignment, sweep
// lambda, run the oracle identity suite, and replay recorded runs.
//
// Exit codes: 0 success, 1 property failure, 2 usage or precondition,
// 3 resource guard, 4 provider or I/O failure.

#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dera/bridge.hpp"
#include "dera/error.hpp"
#include "dera/eval.hpp"
#include "dera/fixtures.hpp"
#include "dera/format.hpp"
#include "dera/lattice.hpp"
#include "dera/manifest.hpp"
#include "dera/model_io.hpp"
#include "dera/sampling.hpp"
#include "dera/verify.hpp"

namespace {

namespace fs = std::filesystem;
using namespace dera;

constexpr int kOk = 0;
constexpr int kPropertyFailure = 1;
constexpr int kUsage = 2;
constexpr int kGuard = 3;
constexpr int kProviderOrIo = 4;

int exit_code_for(Errc code) {
  switch (code) {
    case Errc::TooLarge:
      return kGuard;
    case Errc::Provider:
    case Errc::ProviderTimeout:
    case Errc::Protocol:
    case Errc::Incompatible:
    case Errc::Io:
      return kProviderOrIo;
    default:
      return kUsage;
  }
}

// Copies everything written to `primary` into `copy` so stdout can be hashed
// into the manifest.
class TeeBuf final : public std::streambuf {
 public:
  TeeBuf(std::streambuf* primary, std::string& copy) : primary_(primary), copy_(copy) {}

 protected:
  int overflow(int c) override {
    if (c == traits_type::eof()) return traits_type::not_eof(c);
    copy_.push_back(static_cast<char>(c));
    return primary_->sputc(static_cast<char>(c));
  }
  std::streamsize xsputn(const char* s, std::streamsize n) override {
    copy_.append(s, static_cast<std::size_t>(n));
    return primary_->sputn(s, n);
  }
  int sync() override { return primary_->pubsync(); }

 private:
  std::streambuf* primary_;
  std::string& copy_;
};

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

// key = value lines; '#' starts a comment, values may be double-quoted.
std::vector<std::pair<std::string, std::string>> read_config(const fs::path& path) {
  std::istringstream in(read_text_file(path));
  std::vector<std::pair<std::string, std::string>> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
      if (line[i] == '"') quoted = !quoted;
      if (line[i] == '#' && !quoted) {
        line.resize(i);
        break;
      }
    }
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      fail(Errc::Parse, path.string() + ":" + std::to_string(lineno) + ": expected key = value");
    }
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
    std::replace(key.begin(), key.end(), '_', '-');
    out.emplace_back(std::move(key), std::move(value));
  }
  return out;
}

std::vector<double> parse_doubles(const std::string& text, const char* what) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::logic_error&) {
      fail(Errc::InvalidArgument, std::string("bad ") + what + " value '" + item + "'");
    }
  }
  if (out.empty()) fail(Errc::InvalidArgument, std::string("empty ") + what);
  return out;
}

std::string relative_to(const fs::path& target, const fs::path& file) {
  const fs::path dir = fs::absolute(file).parent_path();
  return fs::proximate(fs::absolute(target), dir).generic_string();
}

// Options shared by the generating commands.
struct Controls {
  double temperature = 1.0;
  std::size_t top_k = 0;
  double top_p = 1.0;

  void add_to(CLI::App* app) {
    app->add_option("--temperature", temperature, "Softmax temperature")->capture_default_str();
    app->add_option("--top-k", top_k, "Keep the k most likely tokens (0 = all)")->capture_default_str();
    app->add_option("--top-p", top_p, "Nucleus mass")->capture_default_str();
  }
  DecodingControls get() const { return {temperature, top_k, top_p}; }
};

struct Globals {
  std::uint64_t seed = 0;
  std::string config;
  std::string manifest_out;
};

struct FitSftArgs {
  std::string corpus, vocab, out;
  std::size_t order = 1;
  double alpha = kDefaultSmoothing;
  std::size_t max_len = 0;
};

struct AlignArgs {
  std::string model, reward, out, route = "auto";
  double beta = 0.0;
  std::vector<QueryId> queries;
};

struct SampleArgs {
  std::string ref, vocab, lambda = "1";
  std::vector<std::string> aligned;
  double beta = 0.1;
  Controls controls;
  std::optional<std::size_t> max_len;
  std::size_t n = 1;
  QueryId query = 0;
  bool show_dist = false;
  long timeout_ms = kDefaultProviderTimeout.count();
};

struct SweepArgs {
  std::string ref, aligned, reward, out, grid = "0,0.5,1,2", pairs, gnuplot;
  std::optional<double> beta;
  std::size_t samples = 1000;
  std::size_t synth_pairs = 200;
  double baseline_lambda = 0.0;
  std::vector<QueryId> queries{0};
  Controls controls;
};

struct VerifyArgs {
  std::size_t instances = 100;
  std::string ref, aligned, reward, failure_dir = "verify-failure";
  std::optional<double> beta;
  std::vector<QueryId> queries{0};
  bool corrupt = false;
};

struct ReplArgs {
  std::string ref, aligned, vocab;
  double lambda = 1.0;
  Controls controls;
  std::optional<std::size_t> max_len;
};

struct SynthArgs {
  std::size_t sentences = 4000;
  std::string corpus, vocab;
};

struct ReplayArgs {
  std::string manifest;
};

struct Context {
  Globals globals;
  RunManifest manifest;
  std::ostream& out;
  std::istream& in;
  std::ostream& err;
};

// ---------------------------------------------------------------------------

int cmd_fit_sft(Context& ctx, const FitSftArgs& a) {
  ctx.manifest.add_input(a.corpus);
  ctx.manifest.add_input(a.vocab);
  const Vocab vocab = read_vocab(a.vocab);
  const auto corpus = read_corpus(a.corpus, vocab);
  const TabularLM model = fit_sft(vocab, corpus, a.order, a.alpha, a.max_len);
  write_model(a.out, model, relative_to(a.vocab, a.out));
  ctx.manifest.add_output(a.out);
  ctx.out << "wrote " << a.out << " (" << model.rows().size() << " rows, order " << model.order() << ", max_len "
          << model.max_len() << ")\n";
  return kOk;
}

int cmd_align_exact(Context& ctx, const AlignArgs& a) {
  if (!(a.beta > 0.0) || !std::isfinite(a.beta)) fail(Errc::BadBeta, "beta must be a finite value > 0");
  ctx.manifest.add_input(a.model);
  ctx.manifest.add_input(a.reward);
  const ModelFile mf = read_model(a.model);
  const RewardSpec reward = read_reward(a.reward);
  reward.validate(mf.model.max_len());
  std::vector<QueryId> queries = a.queries;
  if (queries.empty()) queries = mf.model.queries();
  if (queries.empty()) queries = {0};

  bool lattice = reward.is_length_band();
  if (a.route == "enumerate") lattice = false;
  if (a.route == "lattice") {
    if (!reward.is_length_band()) fail(Errc::InvalidArgument, "the lattice route needs a length_band reward");
    lattice = true;
  }
  TabularLM aligned = [&] {
    if (lattice) return align_exact_lattice(mf.model, queries, reward, a.beta);
    std::vector<SequenceDistribution> per_query;
    for (QueryId q : queries) per_query.push_back(align_exact(enumerate_dist(mf.model, q), reward, a.beta));
    return conditionals_of(per_query);
  }();
  write_model(a.out, aligned, relative_to(mf.vocab_path, a.out), a.beta);
  ctx.manifest.add_output(a.out);
  ctx.out << "wrote " << a.out << " (" << (lattice ? "lattice" : "enumeration") << " route, beta "
          << format_double(a.beta) << ", " << aligned.rows().size() << " rows)\n";
  return kOk;
}

std::optional<Vocab> vocab_for(const std::string& vocab_path, const std::string& ref_uri) {
  if (!vocab_path.empty()) return read_vocab(vocab_path);
  if (ref_uri.rfind("tabular:", 0) == 0) return read_model(ref_uri.substr(8)).model.vocab();
  return std::nullopt;
}

std::string render(const std::optional<Vocab>& vocab, const Sequence& y, TokenId eos) {
  if (vocab) return detokenize(*vocab, y);
  std::string out;
  for (TokenId t : y.tokens()) {
    if (t == eos) break;
    out += (out.empty() ? "" : " ") + std::to_string(t);
  }
  return out;
}

std::size_t default_max_len(const std::string& ref_uri) {
  if (ref_uri.rfind("tabular:", 0) == 0) return read_model(ref_uri.substr(8)).model.max_len();
  return RealignConfig{}.max_len;
}

void record_uri(RunManifest& m, const std::string& uri) {
  if (uri.rfind("tabular:", 0) == 0) m.add_input(uri.substr(8));
}

int cmd_sample(Context& ctx, const SampleArgs& a) {
  RealignConfig cfg;
  cfg.beta = a.beta;
  cfg.controls = a.controls.get();
  const std::vector<double> lambdas = parse_doubles(a.lambda, "lambda");
  if (lambdas.size() == 1 && a.aligned.size() <= 1) {
    cfg.lambda = lambdas[0];
  } else {
    if (lambdas.size() != a.aligned.size()) {
      fail(Errc::InvalidArgument, "got " + std::to_string(lambdas.size()) + " lambda weight(s) for " +
                                      std::to_string(a.aligned.size()) + " aligned model(s)");
    }
    cfg.lambda = lambdas;
  }
  cfg.max_len = a.max_len ? *a.max_len : default_max_len(a.ref);

  WireOptions wire;
  wire.timeout = std::chrono::milliseconds(a.timeout_ms);
  record_uri(ctx.manifest, a.ref);
  auto ref = open_provider(a.ref, wire);
  std::vector<std::unique_ptr<LogitProvider>> owned;
  std::vector<LogitProvider*> aligned;
  for (const auto& uri : a.aligned) {
    record_uri(ctx.manifest, uri);
    owned.push_back(open_provider(uri, wire));
    aligned.push_back(owned.back().get());
  }
  cfg.validate(ref->info().vocab_size);
  const std::optional<Vocab> vocab = vocab_for(a.vocab, a.ref);
  const TokenId eos = ref->info().eos;

  for (std::size_t i = 0; i < a.n; ++i) {
    RealignConfig c = cfg;
    c.seed = derive_seed(ctx.globals.seed, i);
    GenerationSession session(a.query, eos, c);
    StepObserver observer;
    if (a.show_dist) {
      observer = [&](std::size_t step, const NextTokenDistribution& p, TokenId token) {
        ctx.out << "# step " << step << ":";
        for (std::size_t t = 0; t < p.size(); ++t) {
          if (p[t] == 0.0) continue;
          const std::string name = vocab ? vocab->token(static_cast<TokenId>(t)) : std::to_string(t);
          ctx.out << ' ' << name << '=' << format_double(p[t]);
        }
        ctx.out << " -> " << (vocab ? vocab->token(token) : std::to_string(token)) << '\n';
      };
    }
    const Sequence y = generate(session, *ref, aligned, observer);
    ctx.out << render(vocab, y, eos) << '\n';
  }
  return kOk;
}

int cmd_sweep(Context& ctx, const SweepArgs& a) {
  ctx.manifest.add_input(a.ref);
  ctx.manifest.add_input(a.aligned);
  ctx.manifest.add_input(a.reward);
  const ModelFile ref = read_model(a.ref);
  const ModelFile aligned = read_model(a.aligned);
  const RewardSpec reward = read_reward(a.reward);
  const std::optional<double> beta = a.beta ? a.beta : aligned.beta;
  if (!beta) fail(Errc::InvalidArgument, "no --beta given and the aligned model does not record one");

  SweepOptions o;
  o.grid = parse_doubles(a.grid, "grid");
  o.samples = a.samples;
  o.seed = ctx.globals.seed;
  o.queries = a.queries;
  o.controls = a.controls.get();
  o.baseline_lambda = a.baseline_lambda;
  o.synthesized_pairs = a.synth_pairs;
  if (!a.pairs.empty()) {
    ctx.manifest.add_input(a.pairs);
    o.pairs = read_preference_pairs(a.pairs, ref.model.vocab());
  }
  const auto records = run_sweep(ref.model, aligned.model, reward, *beta, o);

  std::ostringstream csv;
  write_sweep_csv(csv, records);
  write_text_file(a.out, csv.str());
  ctx.manifest.add_output(a.out);
  if (!a.gnuplot.empty()) {
    write_text_file(a.gnuplot, sweep_gnuplot_script(a.out));
    ctx.manifest.add_output(a.gnuplot);
  }
  ctx.out << "lambda  strength  mean_reward  exact_reward  kl_to_ref  win_rate  pairwise_acc\n";
  for (const auto& r : records) {
    ctx.out << format_double(r.lambda) << "  " << format_double(r.exact.effective_strength) << "  "
            << format_double(r.mean_reward) << "  " << format_double(r.exact.expected_reward_exact) << "  "
            << format_double(r.kl_to_ref) << "  " << format_double(r.win_rate) << "  "
            << format_double(r.pairwise_accuracy) << '\n';
  }
  ctx.out << "wrote " << a.out << '\n';
  return kOk;
}

// Shifts one logit of the aligned model's first row: the result is no
// longer the optimum for any reward table the instance could carry.
void corrupt(TabularLM& model) {
  const auto& [key, row] = *model.rows().begin();
  std::vector<double> v(row.values().begin(), row.values().end());
  for (double& x : v) {
    if (!is_masked(x)) {
      x += 0.75;
      break;
    }
  }
  model.set_row(ContextKey(key), LogitVector(std::move(v)));
}

std::string save_failure(const VerifyInstance& inst, const fs::path& dir, std::uint64_t seed) {
  fs::create_directories(dir);
  write_vocab(dir / "vocab.txt", inst.ref.vocab());
  write_model(dir / "ref.json", inst.ref, "vocab.txt");
  write_model(dir / "aligned.json", inst.aligned, "vocab.txt", inst.beta);
  write_reward(dir / "reward.json", inst.reward);
  write_text_file(dir / "instance.txt", "seed = " + std::to_string(seed) + "\nbeta = " + format_double(inst.beta) + "\n");
  std::string qs;
  for (QueryId q : inst.queries) qs += " --queries " + std::to_string(q);
  return "dera verify --ref " + (dir / "ref.json").string() + " --aligned " + (dir / "aligned.json").string() +
         " --reward " + (dir / "reward.json").string() + " --beta " + format_double(inst.beta) + qs;
}

int cmd_verify(Context& ctx, const VerifyArgs& a) {
  std::vector<std::pair<std::uint64_t, VerifyInstance>> instances;
  if (!a.ref.empty() || !a.aligned.empty() || !a.reward.empty()) {
    if (a.ref.empty() || a.aligned.empty() || a.reward.empty()) {
      fail(Errc::InvalidArgument, "--ref, --aligned and --reward go together");
    }
    ctx.manifest.add_input(a.ref);
    ctx.manifest.add_input(a.aligned);
    ctx.manifest.add_input(a.reward);
    const ModelFile al = read_model(a.aligned);
    const std::optional<double> beta = a.beta ? a.beta : al.beta;
    if (!beta) fail(Errc::InvalidArgument, "no --beta given and the aligned model does not record one");
    instances.push_back({ctx.globals.seed, {read_model(a.ref).model, al.model, read_reward(a.reward), *beta, a.queries}});
  } else {
    for (std::size_t i = 0; i < a.instances; ++i) {
      const std::uint64_t s = derive_seed(ctx.globals.seed, i);
      instances.push_back({s, random_verify_instance(s)});
    }
  }
  if (a.corrupt) {
    for (auto& [s, inst] : instances) corrupt(inst.aligned);
  }

  std::vector<PropertyCheck> worst;
  std::optional<std::pair<std::uint64_t, std::size_t>> first_failure;
  for (std::size_t i = 0; i < instances.size(); ++i) {
    const auto checks = verify_instance(instances[i].second);
    if (worst.empty()) worst = checks;
    for (std::size_t k = 0; k < checks.size(); ++k) {
      if (checks[k].deviation > worst[k].deviation || std::isnan(checks[k].deviation)) worst[k] = checks[k];
      if (!checks[k].passed && !first_failure) first_failure = {instances[i].first, i};
    }
  }
  bool all_pass = true;
  for (const auto& c : worst) {
    all_pass = all_pass && c.passed;
    ctx.out << (c.passed ? "PASS " : "FAIL ") << c.name << " max_deviation=" << format_double(c.deviation)
            << " tolerance=" << format_double(c.tolerance) << '\n';
  }
  ctx.out << instances.size() << " instance(s), " << (all_pass ? "all properties hold" : "some properties fail")
          << '\n';
  if (first_failure) {
    const auto& [seed, index] = *first_failure;
    const std::string replay = save_failure(instances[index].second, a.failure_dir, seed);
    ctx.out << "failing instance " << index << " (seed " << seed << ") saved to " << a.failure_dir << "\n"
            << "replay: " << replay << '\n';
  }
  return all_pass ? kOk : kPropertyFailure;
}

int cmd_repl(Context& ctx, const ReplArgs& a) {
  RealignConfig cfg;
  cfg.controls = a.controls.get();
  cfg.max_len = a.max_len ? *a.max_len : default_max_len(a.ref);
  validate_lambda(a.lambda);
  double lambda = a.lambda;
  record_uri(ctx.manifest, a.ref);
  record_uri(ctx.manifest, a.aligned);
  auto ref = open_provider(a.ref);
  auto al = open_provider(a.aligned);
  LogitProvider* aligned[] = {al.get()};
  check_compatible(*ref, aligned);
  const std::optional<Vocab> vocab = vocab_for(a.vocab, a.ref);
  const bool interactive = ::isatty(STDIN_FILENO) && &ctx.in == &std::cin;

  std::uint64_t generation = 0;
  std::string line;
  while (true) {
    if (interactive) ctx.out << "dera(lambda=" << format_double(lambda) << ")> " << std::flush;
    if (!std::getline(ctx.in, line)) break;
    line = trim(line);
    if (line == "/quit" || line == "/exit") break;
    if (line.rfind("/lambda", 0) == 0) {
      try {
        const double x = parse_doubles(trim(line.substr(7)), "lambda").at(0);
        validate_lambda(x);
        lambda = x;
        ctx.out << "lambda = " << format_double(lambda) << '\n';
      } catch (const Error& e) {
        ctx.out << "error: " << e.what() << " (lambda stays " << format_double(lambda) << ")\n";
      }
      continue;
    }
    if (!line.empty() && line.front() == '/') {
      ctx.out << "error: unknown command " << line << " (try /lambda <x> or /quit)\n";
      continue;
    }
    QueryId q = 0;
    if (!line.empty()) {
      try {
        std::size_t used = 0;
        const unsigned long long v = std::stoull(line, &used);
        if (used != line.size()) throw std::invalid_argument(line);
        q = static_cast<QueryId>(v);
      } catch (const std::logic_error&) {
        ctx.out << "error: a query is an integer id\n";
        continue;
      }
    }
    RealignConfig c = cfg;
    c.lambda = lambda;
    c.seed = derive_seed(ctx.globals.seed, generation);
    const Sequence y = generate(*ref, aligned, q, c);
    const std::string text = render(vocab, y, ref->info().eos);
    ctx.out << text << '\n';
    ctx.manifest.log.push_back("generation=" + std::to_string(generation) + " lambda=" + format_double(lambda) +
                               " query=" + std::to_string(q) + " seed=" + std::to_string(c.seed) + " response=" + text);
    ++generation;
  }
  return kOk;
}

int cmd_synth_corpus(Context& ctx, const SynthArgs& a) {
  const LengthCorpus lc = synthetic_length_corpus(ctx.globals.seed, a.sentences);
  write_vocab(a.vocab, lc.vocab);
  write_corpus(a.corpus, lc.vocab, lc.corpus);
  ctx.manifest.add_output(a.vocab);
  ctx.manifest.add_output(a.corpus);
  ctx.out << "wrote " << a.corpus << " (" << lc.corpus.size() << " responses) and " << a.vocab << '\n';
  return kOk;
}

int run(std::vector<std::string> args, std::ostream& out, std::istream& in, std::ostream& err);

int cmd_replay(Context& ctx, const ReplayArgs& a) {
  const RunManifest m = read_manifest(a.manifest);
  if (m.command == "replay") fail(Errc::InvalidArgument, "refusing to replay a replay");
  for (const auto& [path, hash] : m.input_hashes) {
    if (!fs::exists(path) || sha256_file(path) != hash) fail(Errc::Io, "input " + path + " changed since the run");
  }
  std::vector<std::string> args;
  for (std::size_t i = 1; i < m.argv.size(); ++i) {
    if (m.argv[i] == "--manifest-out") {
      ++i;
      continue;
    }
    if (m.argv[i].rfind("--manifest-out=", 0) == 0) continue;
    args.push_back(m.argv[i]);
  }
  std::ostringstream captured;
  std::istringstream no_input;
  const int code = run(args, captured, no_input, ctx.err);
  bool same = code == m.exit_code;
  if (!same) ctx.out << "exit code " << code << " differs from recorded " << m.exit_code << '\n';
  for (const auto& [path, hash] : m.output_hashes) {
    const std::string now = path == "<stdout>" ? sha256_hex(captured.str()) : sha256_file(path);
    if (now != hash) {
      same = false;
      ctx.out << "output " << path << " differs\n";
    }
  }
  ctx.out << (same ? "replay: outputs identical\n" : "replay: outputs differ\n");
  return same ? kOk : kPropertyFailure;
}

// ---------------------------------------------------------------------------

std::string config_path_of(const std::vector<std::string>& args) {
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) return args[i + 1];
    if (args[i].rfind("--config=", 0) == 0) return args[i].substr(9);
  }
  return "";
}

bool given_on_command_line(const std::vector<std::string>& args, const std::string& flag) {
  return std::any_of(args.begin(), args.end(),
                     [&](const std::string& a) { return a == flag || a.rfind(flag + "=", 0) == 0; });
}

int run(std::vector<std::string> args, std::ostream& out, std::istream& in, std::ostream& err) {
  const auto start = std::chrono::steady_clock::now();
  std::string captured;
  TeeBuf tee(out.rdbuf(), captured);
  std::ostream tee_out(&tee);
  Context ctx{{}, {}, tee_out, in, err};
  ctx.manifest.argv = {"dera"};
  ctx.manifest.argv.insert(ctx.manifest.argv.end(), args.begin(), args.end());

  CLI::App app{"Decoding-time realignment of tabular language models"};
  app.fallthrough();
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(engine_version()));
  app.add_option("--seed", ctx.globals.seed, "Master seed")->capture_default_str();
  app.add_option("--config", ctx.globals.config, "key = value file; command-line flags win");
  app.add_option("--manifest-out", ctx.globals.manifest_out, "Write a run manifest (JSON) here");

  FitSftArgs fit;
  auto* fit_cmd = app.add_subcommand("fit-sft", "Fit a smoothed n-gram reference model to a corpus");
  fit_cmd->add_option("--corpus", fit.corpus, "Corpus (query<TAB>tokens per line)")->required();
  fit_cmd->add_option("--vocab", fit.vocab, "Vocabulary file")->required();
  fit_cmd->add_option("--order", fit.order, "Context length")->capture_default_str();
  fit_cmd->add_option("--alpha", fit.alpha, "Additive smoothing")->capture_default_str();
  fit_cmd->add_option("--max-len", fit.max_len, "Maximum response length (0 = longest in corpus)")
      ->capture_default_str();
  fit_cmd->add_option("--out", fit.out, "Output model file")->required();

  AlignArgs align;
  auto* align_cmd = app.add_subcommand("align-exact", "Closed-form KL-regularized optimum of a model");
  align_cmd->add_option("--model", align.model, "Reference model file")->required();
  align_cmd->add_option("--reward", align.reward, "Reward file")->required();
  align_cmd->add_option("--beta", align.beta, "KL strength")->required();
  align_cmd->add_option("--queries", align.queries, "Queries to align (default: every query in the model)");
  align_cmd->add_option("--route", align.route, "auto, enumerate or lattice")
      ->check(CLI::IsMember({"auto", "enumerate", "lattice"}))
      ->capture_default_str();
  align_cmd->add_option("--out", align.out, "Output model file")->required();

  SampleArgs sample;
  auto* sample_cmd = app.add_subcommand("sample", "Generate with per-token realignment");
  sample_cmd->add_option("--ref", sample.ref, "Reference provider URI")->required();
  sample_cmd->add_option("--aligned", sample.aligned, "Aligned provider URI (repeatable)");
  sample_cmd->add_option("--lambda", sample.lambda, "Realignment weight, or comma-separated weights")
      ->capture_default_str();
  sample_cmd->add_option("--beta", sample.beta, "Training KL strength (informational)")->capture_default_str();
  sample.controls.add_to(sample_cmd);
  sample_cmd->add_option("--max-len", sample.max_len, "Maximum response length");
  sample_cmd->add_option("--n", sample.n, "Number of responses")->capture_default_str();
  sample_cmd->add_option("--query", sample.query, "Query id")->capture_default_str();
  sample_cmd->add_flag("--show-dist", sample.show_dist, "Print the blended next-token law at each step");
  sample_cmd->add_option("--vocab", sample.vocab, "Vocabulary for detokenizing");
  sample_cmd->add_option("--timeout-ms", sample.timeout_ms, "Per-request provider timeout")->capture_default_str();

  SweepArgs sweep;
  auto* sweep_cmd = app.add_subcommand("sweep", "Sweep lambda and compare against the exact optimum");
  sweep_cmd->add_option("--ref", sweep.ref, "Reference model file")->required();
  sweep_cmd->add_option("--aligned", sweep.aligned, "Aligned model file")->required();
  sweep_cmd->add_option("--reward", sweep.reward, "Reward file")->required();
  sweep_cmd->add_option("--beta", sweep.beta, "Training KL strength (default: recorded in the aligned model)");
  sweep_cmd->add_option("--grid", sweep.grid, "Comma-separated lambdas, ascending")->capture_default_str();
  sweep_cmd->add_option("--samples", sweep.samples, "Samples per lambda")->capture_default_str();
  sweep_cmd->add_option("--queries", sweep.queries, "Query ids")->capture_default_str();
  sweep_cmd->add_option("--pairs", sweep.pairs, "Preference pairs (JSONL)");
  sweep_cmd->add_option("--synth-pairs", sweep.synth_pairs, "Pairs to synthesize when --pairs is absent")
      ->capture_default_str();
  sweep_cmd->add_option("--baseline-lambda", sweep.baseline_lambda, "Win rates are against this lambda")
      ->capture_default_str();
  sweep.controls.add_to(sweep_cmd);
  sweep_cmd->add_option("--out", sweep.out, "Output CSV")->required();
  sweep_cmd->add_option("--gnuplot", sweep.gnuplot, "Also write a gnuplot script here");

  VerifyArgs verify;
  auto* verify_cmd = app.add_subcommand("verify", "Run the oracle identity suite");
  verify_cmd->add_option("--instances", verify.instances, "Random instances")->capture_default_str();
  verify_cmd->add_option("--ref", verify.ref, "Reference model file");
  verify_cmd->add_option("--aligned", verify.aligned, "Aligned model file");
  verify_cmd->add_option("--reward", verify.reward, "Reward file");
  verify_cmd->add_option("--beta", verify.beta, "KL strength of the aligned model");
  verify_cmd->add_option("--queries", verify.queries, "Query ids")->capture_default_str();
  verify_cmd->add_flag("--corrupt", verify.corrupt, "Perturb the aligned model first (negative control)");
  verify_cmd->add_option("--failure-dir", verify.failure_dir, "Where a failing instance is saved")
      ->capture_default_str();

  ReplArgs repl;
  auto* repl_cmd = app.add_subcommand("repl", "Interactive generation; /lambda <x> changes lambda");
  repl_cmd->add_option("--ref", repl.ref, "Reference provider URI")->required();
  repl_cmd->add_option("--aligned", repl.aligned, "Aligned provider URI")->required();
  repl_cmd->add_option("--lambda", repl.lambda, "Initial lambda")->capture_default_str();
  repl.controls.add_to(repl_cmd);
  repl_cmd->add_option("--max-len", repl.max_len, "Maximum response length");
  repl_cmd->add_option("--vocab", repl.vocab, "Vocabulary for detokenizing");

  SynthArgs synth;
  auto* synth_cmd = app.add_subcommand("synth-corpus", "Write the synthetic length-reward corpus");
  synth_cmd->add_option("--sentences", synth.sentences, "Number of responses")->capture_default_str();
  synth_cmd->add_option("--out-corpus", synth.corpus, "Corpus file")->required();
  synth_cmd->add_option("--out-vocab", synth.vocab, "Vocabulary file")->required();

  ReplayArgs replay;
  auto* replay_cmd = app.add_subcommand("replay", "Re-run a recorded manifest and compare outputs");
  replay_cmd->add_option("--manifest", replay.manifest, "Manifest file")->required();

  int code = kOk;
  try {
    // Config entries go in right after the subcommand name unless the same
    // flag was given explicitly.
    std::vector<std::string> full = args;
    const std::string config = config_path_of(args);
    if (!config.empty()) {
      ctx.manifest.add_input(config);
      std::size_t sub = 0;
      while (sub < full.size() && !app.get_subcommand_no_throw(full[sub])) ++sub;
      std::vector<std::string> extra;
      CLI::App* target = sub < full.size() ? app.get_subcommand(full[sub]) : &app;
      for (const auto& [key, value] : read_config(config)) {
        ctx.manifest.config[key] = value;
        const std::string flag = "--" + key;
        if (given_on_command_line(args, flag)) continue;
        const CLI::Option* opt = target->get_option_no_throw(flag);
        if (!opt) opt = app.get_option_no_throw(flag);
        if (!opt || key == "config" || key == "manifest-out") {
          fail(Errc::InvalidArgument, "config key '" + key + "' is not an option of this command");
        }
        if (opt->get_expected_min() == 0) {
          if (value == "true" || value == "1") extra.push_back(flag);
        } else {
          extra.push_back(flag);
          extra.push_back(value);
        }
      }
      const auto at = full.begin() + static_cast<std::ptrdiff_t>(std::min(sub + 1, full.size()));
      full.insert(at, extra.begin(), extra.end());
    }
    std::reverse(full.begin(), full.end());
    app.parse(full);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, tee_out, err) == 0 ? kOk : kUsage;
  } catch (const Error& e) {
    err << "error [" << errc_name(e.code()) << "]: " << e.what() << '\n';
    return exit_code_for(e.code());
  }

  CLI::App* chosen = app.get_subcommands().front();
  ctx.manifest.command = chosen->get_name();
  ctx.manifest.seed = ctx.globals.seed;
  try {
    if (chosen == fit_cmd) code = cmd_fit_sft(ctx, fit);
    else if (chosen == align_cmd) code = cmd_align_exact(ctx, align);
    else if (chosen == sample_cmd) code = cmd_sample(ctx, sample);
    else if (chosen == sweep_cmd) code = cmd_sweep(ctx, sweep);
    else if (chosen == verify_cmd) code = cmd_verify(ctx, verify);
    else if (chosen == repl_cmd) code = cmd_repl(ctx, repl);
    else if (chosen == synth_cmd) code = cmd_synth_corpus(ctx, synth);
    else if (chosen == replay_cmd) code = cmd_replay(ctx, replay);
  } catch (const Error& e) {
    tee_out.flush();
    err << "error [" << errc_name(e.code()) << "]: " << e.what() << '\n';
    code = exit_code_for(e.code());
  } catch (const fs::filesystem_error& e) {
    err << "error [Io]: " << e.what() << '\n';
    code = kProviderOrIo;
  }
  tee_out.flush();

  if (!ctx.globals.manifest_out.empty()) {
    ctx.manifest.exit_code = code;
    ctx.manifest.output_hashes["<stdout>"] = sha256_hex(captured);
    ctx.manifest.duration_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    try {
      write_manifest(ctx.globals.manifest_out, ctx.manifest);
    } catch (const Error& e) {
      err << "error [" << errc_name(e.code()) << "]: " << e.what() << '\n';
      if (code == kOk) code = kProviderOrIo;
    }
  }
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(std::move(args), std::cout, std::cin, std::cerr);
}
