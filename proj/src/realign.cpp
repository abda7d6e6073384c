#include "dera/realign.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "dera/error.hpp"
#include "dera/kernels.hpp"

namespace dera {
namespace {

constexpr double kExtrapolationWarning = 10.0;

void check_sizes(std::size_t v, std::size_t w) {
  if (v != w) fail(Errc::Incompatible, "logit vectors have different sizes");
}

LogitVector finish(std::vector<double> out) {
  auto lv = LogitVector::unchecked(std::move(out));
  if (lv.support_size() == 0) fail(Errc::EmptySupport, "blended logits mask every token");
  return lv;
}

}  // namespace

void validate_lambda(double lambda) {
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) {
    fail(Errc::BadLambda, "lambda must be a finite value >= 0");
  }
}

std::size_t RealignConfig::num_aligned() const noexcept {
  if (const auto* v = std::get_if<std::vector<double>>(&lambda)) return v->size();
  return 1;
}

double RealignConfig::effective_strength() const {
  if (multi_reward()) fail(Errc::InvalidArgument, "effective strength is defined for a single reward");
  const double l = std::get<double>(lambda);
  return l == 0.0 ? std::numeric_limits<double>::infinity() : beta / l;
}

void RealignConfig::validate(std::size_t vocab_size) const {
  if (!(beta > 0.0) || !std::isfinite(beta)) fail(Errc::BadBeta, "beta must be a finite value > 0");
  double largest = 0.0;
  if (const auto* l = std::get_if<double>(&lambda)) {
    validate_lambda(*l);
    largest = *l;
  } else {
    const auto& v = std::get<std::vector<double>>(lambda);
    if (v.empty()) fail(Errc::BadLambda, "multi-reward lambda vector is empty");
    for (double x : v) {
      if (!std::isfinite(x)) fail(Errc::BadLambda, "lambda weights must be finite");
      largest = std::max(largest, std::abs(x));
    }
  }
  if (largest > kExtrapolationWarning) {
    warn("lambda " + std::to_string(largest) + " is far into the extrapolation regime");
  }
  validate_controls(controls, vocab_size);
}

LogitVector blend_logits(const LogitVector& ref, const LogitVector& aligned, double lambda) {
  validate_lambda(lambda);
  check_sizes(ref.size(), aligned.size());
  const auto& k = kernels::active();
  std::vector<double> out(ref.size());
  k.scale_into(out, ref.values(), 1.0 - lambda);
  k.accumulate(out, aligned.values(), lambda);
  return finish(std::move(out));
}

LogitVector blend_multi(const LogitVector& ref, std::span<const LogitVector> aligned,
                        std::span<const double> lambdas) {
  if (aligned.empty()) fail(Errc::InvalidArgument, "blend_multi needs at least one aligned model");
  if (aligned.size() != lambdas.size()) fail(Errc::Incompatible, "one lambda per aligned model required");
  double total = 0.0;
  for (double l : lambdas) {
    if (!std::isfinite(l)) fail(Errc::BadLambda, "lambda weights must be finite");
    total += l;
  }
  const auto& k = kernels::active();
  std::vector<double> out(ref.size());
  k.scale_into(out, ref.values(), 1.0 - total);
  for (std::size_t i = 0; i < aligned.size(); ++i) {
    check_sizes(ref.size(), aligned[i].size());
    k.accumulate(out, aligned[i].values(), lambdas[i]);
  }
  return finish(std::move(out));
}

LogitVector blend(const BlendInput& input, const RealignConfig& cfg) {
  if (input.aligned.empty()) return input.ref;
  if (const auto* l = std::get_if<double>(&cfg.lambda)) {
    if (input.aligned.size() != 1) fail(Errc::Incompatible, "single-reward blend needs one aligned model");
    return blend_logits(input.ref, input.aligned.front(), *l);
  }
  return blend_multi(input.ref, input.aligned, std::get<std::vector<double>>(cfg.lambda));
}

NextTokenDistribution blend_geometric(const NextTokenDistribution& ref, const NextTokenDistribution& aligned,
                                      double lambda) {
  validate_lambda(lambda);
  check_sizes(ref.size(), aligned.size());
  std::vector<double> w(ref.size());
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (ref[i] == 0.0) {
      if (aligned[i] != 0.0 && lambda != 0.0) {
        fail(Errc::SupportMismatch, "aligned mass on token " + std::to_string(i) + " where reference has none");
      }
      w[i] = 0.0;
    } else if (lambda == 0.0) {
      w[i] = ref[i];
    } else {
      w[i] = ref[i] * std::pow(aligned[i] / ref[i], lambda);
    }
  }
  double z = 0.0;
  for (double x : w) z += x;
  if (!(z > 0.0) || !std::isfinite(z)) fail(Errc::EmptySupport, "geometric mixture has no mass");
  for (double& x : w) x /= z;
  return NextTokenDistribution(std::move(w));
}

}  // namespace dera
