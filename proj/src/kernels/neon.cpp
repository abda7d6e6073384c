// NEON (AArch64) variants of the blend and max kernels. The exp kernels reuse
// the scalar reference: AArch64 has no vector exp and the inputs are short.

#include "dera/kernels.hpp"
#include "dera/types.hpp"

#if defined(__aarch64__) && defined(__ARM_NEON)

#include <arm_neon.h>

namespace dera::kernels {
namespace {

constexpr std::size_t kLanes = 2;

inline uint64x2_t is_masked_vec(float64x2_t x) { return vceqq_f64(x, vdupq_n_f64(kMasked)); }

void scale_into(std::span<double> out, std::span<const double> x, double weight) {
  const std::size_t n = out.size();
  if (weight == 0.0) {
    for (std::size_t i = 0; i < n; ++i) out[i] = 0.0;
    return;
  }
  const float64x2_t w = vdupq_n_f64(weight);
  const float64x2_t masked = vdupq_n_f64(kMasked);
  std::size_t i = 0;
  for (; i + kLanes <= n; i += kLanes) {
    const float64x2_t v = vld1q_f64(x.data() + i);
    vst1q_f64(out.data() + i, vbslq_f64(is_masked_vec(v), masked, vmulq_f64(w, v)));
  }
  for (; i < n; ++i) out[i] = is_masked(x[i]) ? kMasked : weight * x[i];
}

void accumulate(std::span<double> out, std::span<const double> x, double weight) {
  if (weight == 0.0) return;
  const std::size_t n = out.size();
  const float64x2_t w = vdupq_n_f64(weight);
  const float64x2_t masked = vdupq_n_f64(kMasked);
  std::size_t i = 0;
  for (; i + kLanes <= n; i += kLanes) {
    const float64x2_t acc = vld1q_f64(out.data() + i);
    const float64x2_t v = vld1q_f64(x.data() + i);
    // vmulq + vaddq rather than vfmaq keeps rounding identical to scalar.
    const float64x2_t sum = vaddq_f64(acc, vmulq_f64(w, v));
    const uint64x2_t mask = vorrq_u64(is_masked_vec(acc), is_masked_vec(v));
    vst1q_f64(out.data() + i, vbslq_f64(mask, masked, sum));
  }
  for (; i < n; ++i) {
    const double sum = out[i] + weight * x[i];
    out[i] = (is_masked(out[i]) || is_masked(x[i])) ? kMasked : sum;
  }
}

double max_value(std::span<const double> x) {
  const std::size_t n = x.size();
  float64x2_t m = vdupq_n_f64(kMasked);
  std::size_t i = 0;
  for (; i + kLanes <= n; i += kLanes) m = vmaxq_f64(m, vld1q_f64(x.data() + i));
  double best = vmaxvq_f64(m);
  for (; i < n; ++i) best = x[i] > best ? x[i] : best;
  return best;
}

KernelTable make_table() {
  const KernelTable& s = scalar_table();
  return KernelTable{Isa::Neon, scale_into, accumulate, max_value, s.sum_exp_shifted,
                     s.exp_shifted};
}

}  // namespace

const KernelTable* neon_table() noexcept {
  static const KernelTable table = make_table();
  return &table;
}

}  // namespace dera::kernels

#else

namespace dera::kernels {
const KernelTable* neon_table() noexcept { return nullptr; }
}  // namespace dera::kernels

#endif
