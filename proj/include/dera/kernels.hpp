#pragma once

// Data-parallel inner loops over logit vectors. Each kernel has a scalar
// reference implementation plus SIMD variants; the active table is picked once
// at startup from the CPU features (override with DERA_SIMD=scalar).
//
// Masked entries are -inf throughout. The blend kernels are bit-identical
// across variants (plain multiply then add, no FMA). The exp kernels agree with
// the scalar reference to a few ulp.

#include <cstddef>
#include <span>
#include <string_view>

namespace dera::kernels {

enum class Isa { Scalar, Avx2, Neon };

struct KernelTable {
  Isa isa;
  // out[i] = weight * x[i]; a zero weight contributes 0 even for masked x,
  // otherwise masked x stays masked.
  void (*scale_into)(std::span<double> out, std::span<const double> x, double weight);
  // out[i] += weight * x[i]; zero weight is a no-op. The result is masked
  // wherever out or x (with nonzero weight) is masked.
  void (*accumulate)(std::span<double> out, std::span<const double> x, double weight);
  // Largest entry, -inf for empty or all-masked input.
  double (*max_value)(std::span<const double> x);
  // sum_i exp(x[i] - shift), masked entries contribute 0.
  double (*sum_exp_shifted)(std::span<const double> x, double shift);
  // out[i] = exp(x[i] - shift), masked entries become 0.
  void (*exp_shifted)(std::span<double> out, std::span<const double> x, double shift);
};

const KernelTable& scalar_table() noexcept;
// nullptr when the variant was not compiled for this target.
const KernelTable* avx2_table() noexcept;
const KernelTable* neon_table() noexcept;

// True when the variant is compiled in and the CPU can run it.
bool supported(Isa isa) noexcept;

// Active table: best supported ISA unless DERA_SIMD=scalar.
const KernelTable& active() noexcept;
std::string_view isa_name(Isa isa) noexcept;

}  // namespace dera::kernels
