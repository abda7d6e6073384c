#include "dera/types.hpp"

#include <cmath>
#include <cstdio>
#include <iostream>

#include "dera/error.hpp"

namespace dera {

namespace {
void default_sink(std::string_view message) { std::cerr << "warning: " << message << '\n'; }
WarningSink g_sink = default_sink;
}  // namespace

void set_warning_sink(WarningSink sink) noexcept { g_sink = sink ? sink : default_sink; }
void warn(std::string_view message) { g_sink(message); }

std::string_view errc_name(Errc code) noexcept {
  switch (code) {
    case Errc::InvalidArgument: return "InvalidArgument";
    case Errc::EmptySupport: return "EmptySupport";
    case Errc::BadControl: return "BadControl";
    case Errc::BadSmoothing: return "BadSmoothing";
    case Errc::BadLambda: return "BadLambda";
    case Errc::BadBeta: return "BadBeta";
    case Errc::BadReward: return "BadReward";
    case Errc::TooLarge: return "TooLarge";
    case Errc::SupportMismatch: return "SupportMismatch";
    case Errc::Incompatible: return "Incompatible";
    case Errc::Provider: return "Provider";
    case Errc::ProviderTimeout: return "ProviderTimeout";
    case Errc::Protocol: return "Protocol";
    case Errc::EmptyDataset: return "EmptyDataset";
    case Errc::EmptyCorpus: return "EmptyCorpus";
    case Errc::Judge: return "Judge";
    case Errc::Io: return "Io";
    case Errc::Parse: return "Parse";
  }
  return "Unknown";
}

Vocab::Vocab(std::vector<std::string> tokens, TokenId eos) : tokens_(std::move(tokens)), eos_(eos) {
  if (tokens_.size() < 2) fail(Errc::InvalidArgument, "vocabulary needs at least 2 tokens");
  if (eos_ < 0 || static_cast<std::size_t>(eos_) >= tokens_.size()) {
    fail(Errc::InvalidArgument, "eos index out of range");
  }
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (tokens_[i].find('\n') != std::string::npos) {
      fail(Errc::InvalidArgument, "token contains a newline");
    }
    if (!index_.emplace(tokens_[i], static_cast<TokenId>(i)).second) {
      fail(Errc::InvalidArgument, "duplicate token '" + tokens_[i] + "'");
    }
  }
}

const std::string& Vocab::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    fail(Errc::InvalidArgument, "token index " + std::to_string(id) + " out of range");
  }
  return tokens_[static_cast<std::size_t>(id)];
}

TokenId Vocab::index_of(const std::string& token) const {
  auto it = index_.find(token);
  if (it == index_.end()) fail(Errc::Parse, "unknown token '" + token + "'");
  return it->second;
}

void Sequence::validate(const Vocab& vocab) const {
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    const TokenId t = tokens_[i];
    if (t < 0 || static_cast<std::size_t>(t) >= vocab.size()) {
      fail(Errc::InvalidArgument, "token index " + std::to_string(t) + " out of range");
    }
    if (t == vocab.eos() && i + 1 != tokens_.size()) {
      fail(Errc::InvalidArgument, "eos must be the final token");
    }
  }
}

std::size_t SequenceHash::operator()(const Sequence& s) const noexcept {
  std::size_t h = 1469598103934665603ull;
  for (TokenId t : s.tokens()) {
    h ^= static_cast<std::size_t>(static_cast<std::uint32_t>(t));
    h *= 1099511628211ull;
  }
  return h;
}

LogitVector LogitVector::unchecked(std::vector<double> values) {
  for (double v : values) {
    if (std::isnan(v) || v == std::numeric_limits<double>::infinity()) {
      fail(Errc::InvalidArgument, "logits must be finite or -inf");
    }
  }
  LogitVector out;
  out.values_ = std::move(values);
  return out;
}

LogitVector::LogitVector(std::vector<double> values) {
  *this = unchecked(std::move(values));
  if (values_.empty()) fail(Errc::InvalidArgument, "empty logit vector");
  if (support_size() == 0) fail(Errc::EmptySupport, "all logits are masked");
}

std::size_t LogitVector::support_size() const noexcept {
  std::size_t n = 0;
  for (double v : values_) n += is_masked(v) ? 0 : 1;
  return n;
}

NextTokenDistribution::NextTokenDistribution(std::vector<double> probs) : probs_(std::move(probs)) {
  double total = 0.0;
  for (double p : probs_) {
    if (!(p >= 0.0) || !std::isfinite(p)) fail(Errc::InvalidArgument, "probabilities must be non-negative");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-12) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", total);
    fail(Errc::InvalidArgument, std::string("probabilities sum to ") + buf);
  }
}

LogitVector uniform_logits(std::size_t vocab_size) {
  return LogitVector(std::vector<double>(vocab_size, 0.0));
}

LogitVector one_hot_logits(std::size_t vocab_size, TokenId index) {
  std::vector<double> v(vocab_size, kMasked);
  v.at(static_cast<std::size_t>(index)) = 0.0;
  return LogitVector(std::move(v));
}

}  // namespace dera
