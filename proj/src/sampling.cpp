#include "dera/sampling.hpp"

#include <future>
#include <string>

#include "dera/controls.hpp"
#include "dera/error.hpp"
#include "dera/logmath.hpp"

namespace dera {
namespace {

void close_with_eos(GenerationSession& s) {
  s.tokens.push_back(s.eos);
  s.closed = true;
}

LogitVector fetch(LogitProvider& p, QueryId query, std::span<const TokenId> prefix, std::size_t step) {
  const auto where = [&] { return "provider '" + p.info().name + "' failed at step " + std::to_string(step) + ": "; };
  try {
    LogitVector h = p.next_logits(query, prefix);
    if (h.size() != p.info().vocab_size) fail(Errc::Incompatible, "logit vector has the wrong size");
    return h;
  } catch (const Error& e) {
    throw Error(Errc::Provider, where() + e.what(), e.code());
  } catch (const std::exception& e) {
    throw Error(Errc::Provider, where() + e.what());
  }
}

}  // namespace

TabularProvider::TabularProvider(std::shared_ptr<const TabularLM> model, std::string name)
    : model_(std::move(model)) {
  if (!model_) fail(Errc::InvalidArgument, "tabular provider needs a model");
  info_ = {model_->vocab().size(), model_->vocab().eos(), std::move(name)};
}

LogitVector TabularProvider::next_logits(QueryId query, std::span<const TokenId> prefix) {
  return model_->logits(query, prefix);
}

void check_compatible(const LogitProvider& ref, std::span<LogitProvider* const> aligned) {
  for (const LogitProvider* a : aligned) {
    if (a->info().vocab_size != ref.info().vocab_size || a->info().eos != ref.info().eos) {
      fail(Errc::Incompatible, "provider '" + a->info().name + "' disagrees with '" + ref.info().name +
                                   "' on vocabulary size or eos");
    }
  }
}

GenerationSession::GenerationSession(QueryId q, TokenId e, RealignConfig c)
    : query(q), eos(e), rng(c.seed), cfg(std::move(c)) {}

TokenId dera_step(GenerationSession& s, const LogitVector& ref_logits, std::span<const LogitVector> aligned_logits,
                  const StepObserver& observer) {
  if (s.closed) fail(Errc::InvalidArgument, "generation session is closed");
  BlendInput input{ref_logits, {aligned_logits.begin(), aligned_logits.end()}};
  LogitVector h = blend(input, s.cfg);
  if (!s.cfg.controls.is_identity()) h = apply_decoding_controls(h, s.cfg.controls);
  const NextTokenDistribution p = softmax(h);
  const TokenId t = sample_categorical(p, s.rng);
  if (observer) observer(s.steps, p, t);
  ++s.steps;
  if (t == s.eos) {
    close_with_eos(s);
  } else {
    s.tokens.push_back(t);
    if (s.tokens.size() >= s.cfg.max_len) close_with_eos(s);
  }
  return t;
}

Sequence generate(GenerationSession& s, LogitProvider& ref, std::span<LogitProvider* const> aligned,
                  const StepObserver& observer) {
  check_compatible(ref, aligned);
  if (ref.info().eos != s.eos) fail(Errc::Incompatible, "session eos differs from the provider's");
  if (!aligned.empty() && s.cfg.num_aligned() != aligned.size()) {
    fail(Errc::Incompatible, "lambda has " + std::to_string(s.cfg.num_aligned()) + " weight(s) for " +
                                 std::to_string(aligned.size()) + " aligned provider(s)");
  }
  s.cfg.validate(ref.info().vocab_size);

  bool overlap = ref.remote();
  for (const LogitProvider* a : aligned) overlap = overlap || a->remote();
  overlap = overlap && !aligned.empty();

  if (!s.closed && s.tokens.size() >= s.cfg.max_len) close_with_eos(s);
  std::vector<LogitVector> al(aligned.size());
  while (!s.closed) {
    const std::size_t step = s.steps;
    const std::span<const TokenId> prefix = s.tokens.tokens();
    LogitVector h_ref;
    if (overlap) {
      // Independent requests in flight together, joined before blending.
      std::vector<std::future<LogitVector>> pending;
      for (LogitProvider* a : aligned) {
        pending.push_back(std::async(std::launch::async, [&, a] { return fetch(*a, s.query, prefix, step); }));
      }
      std::exception_ptr first;
      try {
        h_ref = fetch(ref, s.query, prefix, step);
      } catch (...) {
        first = std::current_exception();
      }
      for (std::size_t i = 0; i < pending.size(); ++i) {
        try {
          al[i] = pending[i].get();
        } catch (...) {
          if (!first) first = std::current_exception();
        }
      }
      if (first) std::rethrow_exception(first);
    } else {
      h_ref = fetch(ref, s.query, prefix, step);
      for (std::size_t i = 0; i < aligned.size(); ++i) al[i] = fetch(*aligned[i], s.query, prefix, step);
    }
    dera_step(s, h_ref, al, observer);
  }
  return s.tokens;
}

Sequence generate(LogitProvider& ref, std::span<LogitProvider* const> aligned, QueryId query,
                  const RealignConfig& cfg, const StepObserver& observer) {
  GenerationSession s(query, ref.info().eos, cfg);
  return generate(s, ref, aligned, observer);
}

}  // namespace dera
