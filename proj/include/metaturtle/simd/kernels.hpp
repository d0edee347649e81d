#pragma once

// Dense double-precision kernels used by the tensor layer.
//
// Every kernel has a portable scalar reference implementation and, on x86-64,
// an AVX2+FMA implementation. The active table is chosen once at startup from
// CPUID (override with METATURTLE_ISA=scalar|avx2) and can be switched at
// runtime for equivalence testing.
//
// Elementwise kernels are bit-identical across implementations. Reductions
// (sum, dot, matmul) reassociate and use fused multiply-add on AVX2, so they
// agree only to rounding; within one implementation they are deterministic.

#include <cstddef>
#include <string_view>

namespace metaturtle::simd {

enum class Isa { scalar, avx2 };

struct KernelTable {
  Isa isa;
  void (*add)(const double* a, const double* b, double* out, std::size_t n);
  void (*sub)(const double* a, const double* b, double* out, std::size_t n);
  void (*mul)(const double* a, const double* b, double* out, std::size_t n);
  // out = a * c
  void (*scale)(const double* a, double c, double* out, std::size_t n);
  // out = a + c
  void (*add_scalar)(const double* a, double c, double* out, std::size_t n);
  void (*relu)(const double* a, double* out, std::size_t n);
  // out = a > 0 ? 1 : 0
  void (*relu_mask)(const double* a, double* out, std::size_t n);
  double (*sum)(const double* a, std::size_t n);
  // out[r, c] = x[r, c] + bias[c]
  void (*add_bias)(const double* x, const double* bias, double* out, std::size_t rows,
                   std::size_t cols);
  // out[c] = sum_r x[r, c]
  void (*sum_rows)(const double* x, double* out, std::size_t rows, std::size_t cols);
  // C[m x n] = A[m x k] * B[k x n], all row-major and contiguous; C is overwritten.
  void (*matmul)(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                 std::size_t n);
  // C[m x n] = A^T * B with A stored as k x m.
  void (*matmul_tn)(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n);
  // false iff any element is NaN or infinite
  bool (*all_finite)(const double* a, std::size_t n);
};

const KernelTable& scalar_kernels();
// nullptr when the binary was built without x86 support.
const KernelTable* avx2_kernels();

bool cpu_supports(Isa isa);

// Table used by the tensor layer.
const KernelTable& active();
// Switches the active table; throws std::invalid_argument when the CPU lacks the ISA.
void set_active(Isa isa);

std::string_view isa_name(Isa isa);

}  // namespace metaturtle::simd
