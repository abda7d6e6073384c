#pragma once

// The token-by-token realigned generation loop and the logit-provider
// interface it pulls from.

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "dera/realign.hpp"
#include "dera/rng.hpp"
#include "dera/tabular.hpp"
#include "dera/types.hpp"

namespace dera {

struct ProviderInfo {
  std::size_t vocab_size = 0;
  TokenId eos = 0;
  std::string name;
};

// Source of next-token logits h_t = f(x, y_<t). Implementations must be
// deterministic functions of (query, prefix). One caller at a time.
class LogitProvider {
 public:
  virtual ~LogitProvider() = default;

  virtual const ProviderInfo& info() const = 0;
  virtual LogitVector next_logits(QueryId query, std::span<const TokenId> prefix) = 0;

  // True when a call blocks on I/O, so the generation loop should overlap
  // calls to several providers.
  virtual bool remote() const noexcept { return false; }
};

class TabularProvider final : public LogitProvider {
 public:
  explicit TabularProvider(std::shared_ptr<const TabularLM> model, std::string name = "tabular");

  const ProviderInfo& info() const override { return info_; }
  // The table row itself, bit for bit.
  LogitVector next_logits(QueryId query, std::span<const TokenId> prefix) override;
  const TabularLM& model() const noexcept { return *model_; }

 private:
  std::shared_ptr<const TabularLM> model_;
  ProviderInfo info_;
};

// Throws Incompatible unless every provider agrees on V and eos.
void check_compatible(const LogitProvider& ref, std::span<LogitProvider* const> aligned);

struct GenerationSession {
  GenerationSession(QueryId query, TokenId eos, RealignConfig cfg);

  QueryId query;
  TokenId eos;
  Sequence tokens;
  Rng rng;
  RealignConfig cfg;
  std::size_t steps = 0;
  bool closed = false;
};

// Called after every sampled token with the distribution it was drawn from.
using StepObserver = std::function<void(std::size_t step, const NextTokenDistribution& dist, TokenId token)>;

// One draw from softmax(controls(blend(ref, aligned))). Appends the token;
// closes on eos, or force-appends eos (no draw) once max_len tokens are out.
TokenId dera_step(GenerationSession& session, const LogitVector& ref_logits,
                  std::span<const LogitVector> aligned_logits, const StepObserver& observer = {});

// Runs dera_step until the session closes. No aligned providers means plain
// sampling from the reference. Failures while fetching logits are rethrown as
// Errc::Provider carrying the step index and the original code as cause().
Sequence generate(GenerationSession& session, LogitProvider& ref, std::span<LogitProvider* const> aligned,
                  const StepObserver& observer = {});
// Fresh session seeded with cfg.seed.
Sequence generate(LogitProvider& ref, std::span<LogitProvider* const> aligned, QueryId query,
                  const RealignConfig& cfg, const StepObserver& observer = {});

}  // namespace dera
