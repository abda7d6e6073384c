// AVX2 variants. Compiled with -mavx2 only; no FMA so that the blend kernels
// round exactly like the scalar reference.

#include <immintrin.h>

#include <cmath>

#include "dera/kernels.hpp"
#include "dera/types.hpp"

namespace dera::kernels {
namespace {

constexpr std::size_t kLanes = 4;

inline __m256d masked_vec() { return _mm256_set1_pd(kMasked); }

inline __m256d is_masked_vec(__m256d x) {
  return _mm256_cmp_pd(x, masked_vec(), _CMP_EQ_OQ);
}

// Cephes-style exp: x = n*ln2 + r, |r| <= ln2/2, Pade form on r.
// Relative error about 2e-16 on [-708, 709]; underflow flushes to 0.
inline __m256d exp_pd(__m256d x) {
  const __m256d lo = _mm256_set1_pd(-708.3964185322641);
  const __m256d hi = _mm256_set1_pd(709.782712893384);
  const __m256d underflow = _mm256_cmp_pd(x, lo, _CMP_LT_OQ);
  x = _mm256_min_pd(_mm256_max_pd(x, lo), hi);

  const __m256d log2e = _mm256_set1_pd(1.4426950408889634073599);
  const __m256d c1 = _mm256_set1_pd(6.93145751953125E-1);
  const __m256d c2 = _mm256_set1_pd(1.42860682030941723212E-6);

  __m256d n = _mm256_round_pd(_mm256_mul_pd(x, log2e),
                              _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC);
  __m256d r = _mm256_sub_pd(x, _mm256_mul_pd(n, c1));
  r = _mm256_sub_pd(r, _mm256_mul_pd(n, c2));
  const __m256d rr = _mm256_mul_pd(r, r);

  __m256d p = _mm256_set1_pd(1.26177193074810590878E-4);
  p = _mm256_add_pd(_mm256_mul_pd(p, rr), _mm256_set1_pd(3.02994407707441961300E-2));
  p = _mm256_add_pd(_mm256_mul_pd(p, rr), _mm256_set1_pd(9.99999999999999999910E-1));
  p = _mm256_mul_pd(p, r);

  __m256d q = _mm256_set1_pd(3.00198505138664455042E-6);
  q = _mm256_add_pd(_mm256_mul_pd(q, rr), _mm256_set1_pd(2.52448340349684104192E-3));
  q = _mm256_add_pd(_mm256_mul_pd(q, rr), _mm256_set1_pd(2.27265548208155028766E-1));
  q = _mm256_add_pd(_mm256_mul_pd(q, rr), _mm256_set1_pd(2.00000000000000000009E0));

  __m256d e = _mm256_div_pd(p, _mm256_sub_pd(q, p));
  e = _mm256_add_pd(_mm256_set1_pd(1.0), _mm256_add_pd(e, e));

  // 2^n via the exponent field; n is in [-1022, 1024] after clamping.
  const __m128i n32 = _mm256_cvtpd_epi32(n);
  __m256i bits = _mm256_cvtepi32_epi64(n32);
  bits = _mm256_add_epi64(bits, _mm256_set1_epi64x(1023));
  bits = _mm256_slli_epi64(bits, 52);
  const __m256d scale = _mm256_castsi256_pd(bits);

  const __m256d result = _mm256_mul_pd(e, scale);
  return _mm256_andnot_pd(underflow, result);
}

void scale_into(std::span<double> out, std::span<const double> x, double weight) {
  const std::size_t n = out.size();
  if (weight == 0.0) {
    for (std::size_t i = 0; i < n; ++i) out[i] = 0.0;
    return;
  }
  const __m256d w = _mm256_set1_pd(weight);
  std::size_t i = 0;
  for (; i + kLanes <= n; i += kLanes) {
    const __m256d v = _mm256_loadu_pd(x.data() + i);
    const __m256d prod = _mm256_mul_pd(w, v);
    _mm256_storeu_pd(out.data() + i, _mm256_blendv_pd(prod, masked_vec(), is_masked_vec(v)));
  }
  for (; i < n; ++i) out[i] = is_masked(x[i]) ? kMasked : weight * x[i];
}

void accumulate(std::span<double> out, std::span<const double> x, double weight) {
  if (weight == 0.0) return;
  const std::size_t n = out.size();
  const __m256d w = _mm256_set1_pd(weight);
  std::size_t i = 0;
  for (; i + kLanes <= n; i += kLanes) {
    const __m256d acc = _mm256_loadu_pd(out.data() + i);
    const __m256d v = _mm256_loadu_pd(x.data() + i);
    const __m256d sum = _mm256_add_pd(acc, _mm256_mul_pd(w, v));
    const __m256d mask = _mm256_or_pd(is_masked_vec(acc), is_masked_vec(v));
    _mm256_storeu_pd(out.data() + i, _mm256_blendv_pd(sum, masked_vec(), mask));
  }
  for (; i < n; ++i) {
    const double sum = out[i] + weight * x[i];
    out[i] = (is_masked(out[i]) || is_masked(x[i])) ? kMasked : sum;
  }
}

double max_value(std::span<const double> x) {
  const std::size_t n = x.size();
  __m256d m = masked_vec();
  std::size_t i = 0;
  for (; i + kLanes <= n; i += kLanes) m = _mm256_max_pd(m, _mm256_loadu_pd(x.data() + i));
  alignas(32) double lanes[kLanes];
  _mm256_store_pd(lanes, m);
  double best = kMasked;
  for (double v : lanes) best = v > best ? v : best;
  for (; i < n; ++i) best = x[i] > best ? x[i] : best;
  return best;
}

double sum_exp_shifted(std::span<const double> x, double shift) {
  const std::size_t n = x.size();
  const __m256d s = _mm256_set1_pd(shift);
  __m256d acc = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + kLanes <= n; i += kLanes) {
    const __m256d v = _mm256_loadu_pd(x.data() + i);
    const __m256d e = exp_pd(_mm256_sub_pd(v, s));
    acc = _mm256_add_pd(acc, _mm256_andnot_pd(is_masked_vec(v), e));
  }
  alignas(32) double lanes[kLanes];
  _mm256_store_pd(lanes, acc);
  double total = (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
  for (; i < n; ++i) {
    if (!is_masked(x[i])) total += std::exp(x[i] - shift);
  }
  return total;
}

void exp_shifted(std::span<double> out, std::span<const double> x, double shift) {
  const std::size_t n = out.size();
  const __m256d s = _mm256_set1_pd(shift);
  std::size_t i = 0;
  for (; i + kLanes <= n; i += kLanes) {
    const __m256d v = _mm256_loadu_pd(x.data() + i);
    const __m256d e = exp_pd(_mm256_sub_pd(v, s));
    _mm256_storeu_pd(out.data() + i, _mm256_andnot_pd(is_masked_vec(v), e));
  }
  for (; i < n; ++i) out[i] = is_masked(x[i]) ? 0.0 : std::exp(x[i] - shift);
}

constexpr KernelTable kTable{Isa::Avx2, scale_into, accumulate, max_value,
                             sum_exp_shifted, exp_shifted};

}  // namespace

const KernelTable* avx2_table() noexcept { return &kTable; }

}  // namespace dera::kernels
