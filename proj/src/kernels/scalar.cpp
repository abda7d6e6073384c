#include <cmath>

#include "dera/kernels.hpp"
#include "dera/types.hpp"

namespace dera::kernels {
namespace {

void scale_into(std::span<double> out, std::span<const double> x, double weight) {
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (weight == 0.0) {
      out[i] = 0.0;
    } else {
      out[i] = is_masked(x[i]) ? kMasked : weight * x[i];
    }
  }
}

void accumulate(std::span<double> out, std::span<const double> x, double weight) {
  if (weight == 0.0) return;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double sum = out[i] + weight * x[i];
    out[i] = (is_masked(out[i]) || is_masked(x[i])) ? kMasked : sum;
  }
}

double max_value(std::span<const double> x) {
  double m = kMasked;
  for (double v : x) m = v > m ? v : m;
  return m;
}

double sum_exp_shifted(std::span<const double> x, double shift) {
  double s = 0.0;
  for (double v : x) {
    if (!is_masked(v)) s += std::exp(v - shift);
  }
  return s;
}

void exp_shifted(std::span<double> out, std::span<const double> x, double shift) {
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = is_masked(x[i]) ? 0.0 : std::exp(x[i] - shift);
  }
}

constexpr KernelTable kTable{Isa::Scalar, scale_into, accumulate, max_value,
                             sum_exp_shifted, exp_shifted};

}  // namespace

const KernelTable& scalar_table() noexcept { return kTable; }

}  // namespace dera::kernels
