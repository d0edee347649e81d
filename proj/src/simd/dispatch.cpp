#include <atomic>
#include <cstdlib>
#include <stdexcept>
#include <string>

#include "metaturtle/simd/kernels.hpp"

namespace metaturtle::simd {
namespace {

const KernelTable* pick_default() {
  if (const char* env = std::getenv("METATURTLE_ISA")) {
    const std::string want(env);
    if (want == "scalar") return &scalar_kernels();
    if (want == "avx2" && cpu_supports(Isa::avx2)) return avx2_kernels();
  }
  if (cpu_supports(Isa::avx2)) return avx2_kernels();
  return &scalar_kernels();
}

std::atomic<const KernelTable*>& slot() {
  static std::atomic<const KernelTable*> table{pick_default()};
  return table;
}

}  // namespace

bool cpu_supports(Isa isa) {
  switch (isa) {
    case Isa::scalar:
      return true;
    case Isa::avx2:
#if defined(__x86_64__) && (defined(__GNUC__) || defined(__clang__))
      return avx2_kernels() != nullptr && __builtin_cpu_supports("avx2") &&
             __builtin_cpu_supports("fma");
#else
      return false;
#endif
  }
  return false;
}

const KernelTable& active() { return *slot().load(std::memory_order_relaxed); }

void set_active(Isa isa) {
  if (!cpu_supports(isa)) {
    throw std::invalid_argument("simd: ISA not supported on this CPU: " +
                                std::string(isa_name(isa)));
  }
  slot().store(isa == Isa::avx2 ? avx2_kernels() : &scalar_kernels(),
               std::memory_order_relaxed);
}

std::string_view isa_name(Isa isa) {
  return isa == Isa::avx2 ? "avx2" : "scalar";
}

}  // namespace metaturtle::simd
