#include <cstdlib>
#include <string_view>

#include "dera/kernels.hpp"

namespace dera::kernels {

#if !defined(DERA_HAVE_AVX2)
const KernelTable* avx2_table() noexcept { return nullptr; }
#endif

namespace {

bool cpu_has_avx2() noexcept {
#if defined(DERA_HAVE_AVX2) && (defined(__GNUC__) || defined(__clang__))
  __builtin_cpu_init();
  return __builtin_cpu_supports("avx2");
#else
  return false;
#endif
}

const KernelTable& select() noexcept {
  if (const char* env = std::getenv("DERA_SIMD"); env && std::string_view(env) == "scalar") {
    return scalar_table();
  }
  if (supported(Isa::Avx2)) return *avx2_table();
  if (supported(Isa::Neon)) return *neon_table();
  return scalar_table();
}

}  // namespace

bool supported(Isa isa) noexcept {
  switch (isa) {
    case Isa::Scalar: return true;
    case Isa::Avx2: return avx2_table() != nullptr && cpu_has_avx2();
    case Isa::Neon: return neon_table() != nullptr;
  }
  return false;
}

const KernelTable& active() noexcept {
  static const KernelTable& table = select();
  return table;
}

std::string_view isa_name(Isa isa) noexcept {
  switch (isa) {
    case Isa::Scalar: return "scalar";
    case Isa::Avx2: return "avx2";
    case Isa::Neon: return "neon";
  }
  return "unknown";
}

}  // namespace dera::kernels
