#include "dera/logmath.hpp"

#include <cmath>
#include <limits>

#include "dera/error.hpp"
#include "dera/kernels.hpp"

namespace dera {

double logsumexp(std::span<const double> x) {
  const auto& k = kernels::active();
  const double m = k.max_value(x);
  if (is_masked(m)) return kMasked;
  return m + std::log(k.sum_exp_shifted(x, m));
}

LogitVector log_softmax(const LogitVector& h) {
  const double lse = logsumexp(h.values());
  if (is_masked(lse)) fail(Errc::EmptySupport, "log_softmax of an all-masked vector");
  std::vector<double> out(h.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = h.masked(i) ? kMasked : h[i] - lse;
  }
  return LogitVector(std::move(out));
}

NextTokenDistribution softmax(const LogitVector& h) {
  const auto& k = kernels::active();
  const double m = k.max_value(h.values());
  if (is_masked(m)) fail(Errc::EmptySupport, "softmax of an all-masked vector");
  std::vector<double> p(h.size());
  k.exp_shifted(p, h.values(), m);
  double total = 0.0;
  for (double v : p) total += v;
  for (double& v : p) v /= total;
  return NextTokenDistribution(std::move(p));
}

LogitVector log_of(const NextTokenDistribution& p) {
  std::vector<double> out(p.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = p[i] > 0.0 ? std::log(p[i]) : kMasked;
  return LogitVector(std::move(out));
}

double kl_divergence(std::span<const double> logp, std::span<const double> logq) {
  if (logp.size() != logq.size()) fail(Errc::Incompatible, "KL of vectors with different sizes");
  double kl = 0.0;
  for (std::size_t i = 0; i < logp.size(); ++i) {
    if (is_masked(logp[i])) continue;
    if (is_masked(logq[i])) return std::numeric_limits<double>::infinity();
    kl += std::exp(logp[i]) * (logp[i] - logq[i]);
  }
  // Rounding can leave a tiny negative value for near-identical inputs.
  return kl < 0.0 ? 0.0 : kl;
}

double total_variation(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) fail(Errc::Incompatible, "TV of vectors with different sizes");
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += std::abs(p[i] - q[i]);
  return 0.5 * s;
}

}  // namespace dera
