#pragma once

// Vocabularies, token sequences and logit / probability vectors.

#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace dera {

using TokenId = std::int32_t;
using QueryId = std::int32_t;

inline constexpr double kMasked = -std::numeric_limits<double>::infinity();

inline bool is_masked(double x) noexcept { return x == kMasked; }

class Vocab {
 public:
  Vocab(std::vector<std::string> tokens, TokenId eos);

  std::size_t size() const noexcept { return tokens_.size(); }
  TokenId eos() const noexcept { return eos_; }
  const std::string& token(TokenId id) const;
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }

  // Throws Errc::Parse for unknown strings.
  TokenId index_of(const std::string& token) const;
  bool contains(const std::string& token) const { return index_.count(token) != 0; }

  friend bool operator==(const Vocab& a, const Vocab& b) {
    return a.eos_ == b.eos_ && a.tokens_ == b.tokens_;
  }

 private:
  std::vector<std::string> tokens_;
  TokenId eos_;
  std::unordered_map<std::string, TokenId> index_;
};

// Token indices of a (possibly unfinished) response. If eos appears it is the
// final element.
class Sequence {
 public:
  Sequence() = default;
  explicit Sequence(std::vector<TokenId> tokens) : tokens_(std::move(tokens)) {}

  std::span<const TokenId> tokens() const noexcept { return tokens_; }
  std::size_t size() const noexcept { return tokens_.size(); }
  bool empty() const noexcept { return tokens_.empty(); }
  TokenId operator[](std::size_t i) const { return tokens_[i]; }
  TokenId back() const { return tokens_.back(); }
  void push_back(TokenId t) { tokens_.push_back(t); }

  bool terminated(TokenId eos) const { return !tokens_.empty() && tokens_.back() == eos; }
  // Response length |y|: tokens excluding a trailing eos.
  std::size_t response_length(TokenId eos) const {
    return terminated(eos) ? tokens_.size() - 1 : tokens_.size();
  }

  // Throws Errc::InvalidArgument if a token is out of range or eos is not last.
  void validate(const Vocab& vocab) const;

  auto operator<=>(const Sequence&) const = default;
  bool operator==(const Sequence&) const = default;

 private:
  std::vector<TokenId> tokens_;
};

struct SequenceHash {
  std::size_t operator()(const Sequence& s) const noexcept;
};

// V finite scores, with kMasked marking excluded tokens. At least one entry is
// finite; +inf and NaN are rejected.
class LogitVector {
 public:
  LogitVector() = default;
  explicit LogitVector(std::vector<double> values);

  std::size_t size() const noexcept { return values_.size(); }
  double operator[](std::size_t i) const { return values_[i]; }
  std::span<const double> values() const noexcept { return values_; }
  bool masked(std::size_t i) const { return is_masked(values_[i]); }
  std::size_t support_size() const noexcept;

  bool operator==(const LogitVector&) const = default;

  // Checks only the entry-wise rules; an all-masked vector is allowed here so
  // that callers can raise EmptySupport themselves.
  static LogitVector unchecked(std::vector<double> values);

 private:
  std::vector<double> values_;
};

class NextTokenDistribution {
 public:
  explicit NextTokenDistribution(std::vector<double> probs);

  std::size_t size() const noexcept { return probs_.size(); }
  double operator[](std::size_t i) const { return probs_[i]; }
  std::span<const double> probs() const noexcept { return probs_; }

 private:
  std::vector<double> probs_;
};

LogitVector uniform_logits(std::size_t vocab_size);
// One-hot at `index`, every other token masked.
LogitVector one_hot_logits(std::size_t vocab_size, TokenId index);

}  // namespace dera
