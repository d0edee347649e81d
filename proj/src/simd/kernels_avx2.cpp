// AVX2 + FMA kernels. This translation unit is compiled with -mavx2 -mfma and
// must only be entered after a CPUID check (see dispatch.cpp).

#include "metaturtle/simd/kernels.hpp"

#if defined(__x86_64__) && defined(__AVX2__) && defined(__FMA__)

#include <immintrin.h>

#include <cmath>

namespace metaturtle::simd {
namespace {

constexpr std::size_t kLanes = 4;

template <class VecOp, class ScalarOp>
inline void binary(const double* a, const double* b, double* out, std::size_t n, VecOp vop,
                   ScalarOp sop) {
  std::size_t i = 0;
  for (; i + 2 * kLanes <= n; i += 2 * kLanes) {
    __m256d x0 = _mm256_loadu_pd(a + i);
    __m256d x1 = _mm256_loadu_pd(a + i + kLanes);
    __m256d y0 = _mm256_loadu_pd(b + i);
    __m256d y1 = _mm256_loadu_pd(b + i + kLanes);
    _mm256_storeu_pd(out + i, vop(x0, y0));
    _mm256_storeu_pd(out + i + kLanes, vop(x1, y1));
  }
  for (; i + kLanes <= n; i += kLanes) {
    _mm256_storeu_pd(out + i, vop(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  }
  for (; i < n; ++i) out[i] = sop(a[i], b[i]);
}

void add(const double* a, const double* b, double* out, std::size_t n) {
  binary(
      a, b, out, n, [](__m256d x, __m256d y) { return _mm256_add_pd(x, y); },
      [](double x, double y) { return x + y; });
}

void sub(const double* a, const double* b, double* out, std::size_t n) {
  binary(
      a, b, out, n, [](__m256d x, __m256d y) { return _mm256_sub_pd(x, y); },
      [](double x, double y) { return x - y; });
}

void mul(const double* a, const double* b, double* out, std::size_t n) {
  binary(
      a, b, out, n, [](__m256d x, __m256d y) { return _mm256_mul_pd(x, y); },
      [](double x, double y) { return x * y; });
}

void scale(const double* a, double c, double* out, std::size_t n) {
  const __m256d vc = _mm256_set1_pd(c);
  std::size_t i = 0;
  for (; i + kLanes <= n; i += kLanes) {
    _mm256_storeu_pd(out + i, _mm256_mul_pd(_mm256_loadu_pd(a + i), vc));
  }
  for (; i < n; ++i) out[i] = a[i] * c;
}

void add_scalar(const double* a, double c, double* out, std::size_t n) {
  const __m256d vc = _mm256_set1_pd(c);
  std::size_t i = 0;
  for (; i + kLanes <= n; i += kLanes) {
    _mm256_storeu_pd(out + i, _mm256_add_pd(_mm256_loadu_pd(a + i), vc));
  }
  for (; i < n; ++i) out[i] = a[i] + c;
}

void relu(const double* a, double* out, std::size_t n) {
  const __m256d zero = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + kLanes <= n; i += kLanes) {
    __m256d x = _mm256_loadu_pd(a + i);
    // and-mask keeps -0.0 -> 0.0 and NaN behaviour identical to the scalar select
    __m256d keep = _mm256_cmp_pd(x, zero, _CMP_GT_OQ);
    _mm256_storeu_pd(out + i, _mm256_and_pd(x, keep));
  }
  for (; i < n; ++i) out[i] = a[i] > 0.0 ? a[i] : 0.0;
}

void relu_mask(const double* a, double* out, std::size_t n) {
  const __m256d zero = _mm256_setzero_pd();
  const __m256d one = _mm256_set1_pd(1.0);
  std::size_t i = 0;
  for (; i + kLanes <= n; i += kLanes) {
    __m256d keep = _mm256_cmp_pd(_mm256_loadu_pd(a + i), zero, _CMP_GT_OQ);
    _mm256_storeu_pd(out + i, _mm256_and_pd(one, keep));
  }
  for (; i < n; ++i) out[i] = a[i] > 0.0 ? 1.0 : 0.0;
}

inline double hsum(__m256d v) {
  __m128d lo = _mm256_castpd256_pd128(v);
  __m128d hi = _mm256_extractf128_pd(v, 1);
  lo = _mm_add_pd(lo, hi);
  __m128d sh = _mm_unpackhi_pd(lo, lo);
  return _mm_cvtsd_f64(_mm_add_sd(lo, sh));
}

double sum(const double* a, std::size_t n) {
  __m256d acc0 = _mm256_setzero_pd();
  __m256d acc1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 2 * kLanes <= n; i += 2 * kLanes) {
    acc0 = _mm256_add_pd(acc0, _mm256_loadu_pd(a + i));
    acc1 = _mm256_add_pd(acc1, _mm256_loadu_pd(a + i + kLanes));
  }
  for (; i + kLanes <= n; i += kLanes) acc0 = _mm256_add_pd(acc0, _mm256_loadu_pd(a + i));
  double s = hsum(_mm256_add_pd(acc0, acc1));
  for (; i < n; ++i) s += a[i];
  return s;
}

void add_bias(const double* x, const double* bias, double* out, std::size_t rows,
              std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) add(x + r * cols, bias, out + r * cols, cols);
}

void sum_rows(const double* x, double* out, std::size_t rows, std::size_t cols) {
  for (std::size_t c = 0; c < cols; ++c) out[c] = 0.0;
  for (std::size_t r = 0; r < rows; ++r) add(out, x + r * cols, out, cols);
}

double dot(const double* a, const double* b, std::size_t n) {
  __m256d acc0 = _mm256_setzero_pd();
  __m256d acc1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 2 * kLanes <= n; i += 2 * kLanes) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
    acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + kLanes), _mm256_loadu_pd(b + i + kLanes),
                           acc1);
  }
  for (; i + kLanes <= n; i += kLanes) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
  }
  double s = hsum(_mm256_add_pd(acc0, acc1));
  for (; i < n; ++i) s = std::fma(a[i], b[i], s);
  return s;
}

// Two rows of C against a 16-column panel of B.
inline void panel_2x16(const double* a0, const double* a1, const double* b, double* c0,
                       double* c1, std::size_t k, std::size_t ldb, std::size_t sa) {
  __m256d r00 = _mm256_setzero_pd(), r01 = _mm256_setzero_pd();
  __m256d r02 = _mm256_setzero_pd(), r03 = _mm256_setzero_pd();
  __m256d r10 = _mm256_setzero_pd(), r11 = _mm256_setzero_pd();
  __m256d r12 = _mm256_setzero_pd(), r13 = _mm256_setzero_pd();
  for (std::size_t p = 0; p < k; ++p) {
    const double* bp = b + p * ldb;
    __m256d b0 = _mm256_loadu_pd(bp);
    __m256d b1 = _mm256_loadu_pd(bp + 4);
    __m256d b2 = _mm256_loadu_pd(bp + 8);
    __m256d b3 = _mm256_loadu_pd(bp + 12);
    __m256d x0 = _mm256_broadcast_sd(a0 + p * sa);
    __m256d x1 = _mm256_broadcast_sd(a1 + p * sa);
    r00 = _mm256_fmadd_pd(x0, b0, r00);
    r01 = _mm256_fmadd_pd(x0, b1, r01);
    r02 = _mm256_fmadd_pd(x0, b2, r02);
    r03 = _mm256_fmadd_pd(x0, b3, r03);
    r10 = _mm256_fmadd_pd(x1, b0, r10);
    r11 = _mm256_fmadd_pd(x1, b1, r11);
    r12 = _mm256_fmadd_pd(x1, b2, r12);
    r13 = _mm256_fmadd_pd(x1, b3, r13);
  }
  _mm256_storeu_pd(c0, r00);
  _mm256_storeu_pd(c0 + 4, r01);
  _mm256_storeu_pd(c0 + 8, r02);
  _mm256_storeu_pd(c0 + 12, r03);
  _mm256_storeu_pd(c1, r10);
  _mm256_storeu_pd(c1 + 4, r11);
  _mm256_storeu_pd(c1 + 8, r12);
  _mm256_storeu_pd(c1 + 12, r13);
}

inline void panel_1x16(const double* a0, const double* b, double* c0, std::size_t k,
                       std::size_t ldb, std::size_t sa) {
  __m256d r0 = _mm256_setzero_pd(), r1 = _mm256_setzero_pd();
  __m256d r2 = _mm256_setzero_pd(), r3 = _mm256_setzero_pd();
  for (std::size_t p = 0; p < k; ++p) {
    const double* bp = b + p * ldb;
    __m256d x0 = _mm256_broadcast_sd(a0 + p * sa);
    r0 = _mm256_fmadd_pd(x0, _mm256_loadu_pd(bp), r0);
    r1 = _mm256_fmadd_pd(x0, _mm256_loadu_pd(bp + 4), r1);
    r2 = _mm256_fmadd_pd(x0, _mm256_loadu_pd(bp + 8), r2);
    r3 = _mm256_fmadd_pd(x0, _mm256_loadu_pd(bp + 12), r3);
  }
  _mm256_storeu_pd(c0, r0);
  _mm256_storeu_pd(c0 + 4, r1);
  _mm256_storeu_pd(c0 + 8, r2);
  _mm256_storeu_pd(c0 + 12, r3);
}

inline void panel_2x4(const double* a0, const double* a1, const double* b, double* c0,
                      double* c1, std::size_t k, std::size_t ldb, std::size_t sa) {
  __m256d r0 = _mm256_setzero_pd(), r1 = _mm256_setzero_pd();
  for (std::size_t p = 0; p < k; ++p) {
    __m256d bv = _mm256_loadu_pd(b + p * ldb);
    r0 = _mm256_fmadd_pd(_mm256_broadcast_sd(a0 + p * sa), bv, r0);
    r1 = _mm256_fmadd_pd(_mm256_broadcast_sd(a1 + p * sa), bv, r1);
  }
  _mm256_storeu_pd(c0, r0);
  _mm256_storeu_pd(c1, r1);
}

inline void panel_1x4(const double* a0, const double* b, double* c0, std::size_t k,
                      std::size_t ldb, std::size_t sa) {
  __m256d r0 = _mm256_setzero_pd();
  for (std::size_t p = 0; p < k; ++p) {
    r0 = _mm256_fmadd_pd(_mm256_broadcast_sd(a0 + p * sa), _mm256_loadu_pd(b + p * ldb), r0);
  }
  _mm256_storeu_pd(c0, r0);
}

// Row i of A starts at a + i * ra; consecutive inner elements are sa apart.
void matmul_strided(const double* a, std::size_t ra, std::size_t sa, const double* b, double* c,
                    std::size_t m, std::size_t k, std::size_t n) {
  std::size_t j = 0;
  for (; j + 16 <= n; j += 16) {
    std::size_t i = 0;
    for (; i + 2 <= m; i += 2) {
      panel_2x16(a + i * ra, a + (i + 1) * ra, b + j, c + i * n + j, c + (i + 1) * n + j, k, n, sa);
    }
    if (i < m) panel_1x16(a + i * ra, b + j, c + i * n + j, k, n, sa);
  }
  for (; j + 4 <= n; j += 4) {
    std::size_t i = 0;
    for (; i + 2 <= m; i += 2) {
      panel_2x4(a + i * ra, a + (i + 1) * ra, b + j, c + i * n + j, c + (i + 1) * n + j, k, n, sa);
    }
    if (i < m) panel_1x4(a + i * ra, b + j, c + i * n + j, k, n, sa);
  }
  for (; j < n; ++j) {
    for (std::size_t i = 0; i < m; ++i) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s = std::fma(a[i * ra + p * sa], b[p * n + j], s);
      c[i * n + j] = s;
    }
  }
}

void matmul(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
            std::size_t n) {
  if (n == 1) {
    for (std::size_t i = 0; i < m; ++i) c[i] = dot(a + i * k, b, k);
    return;
  }
  matmul_strided(a, k, 1, b, c, m, k, n);
}

void matmul_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
               std::size_t n) {
  matmul_strided(a, 1, m, b, c, m, k, n);
}

bool all_finite(const double* a, std::size_t n) {
  // x - x is 0 for finite x and NaN otherwise; NaNs survive the accumulation.
  __m256d acc = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + kLanes <= n; i += kLanes) {
    __m256d x = _mm256_loadu_pd(a + i);
    acc = _mm256_add_pd(acc, _mm256_sub_pd(x, x));
  }
  __m256d bad = _mm256_cmp_pd(acc, acc, _CMP_UNORD_Q);
  if (_mm256_movemask_pd(bad) != 0) return false;
  for (; i < n; ++i) {
    if (!std::isfinite(a[i])) return false;
  }
  return true;
}

constexpr KernelTable kTable{
    Isa::avx2, add,      sub,    mul,       scale, add_scalar, relu, relu_mask, sum,
    add_bias,  sum_rows, matmul, matmul_tn, all_finite,
};

}  // namespace

const KernelTable* avx2_kernels() { return &kTable; }

}  // namespace metaturtle::simd

#else

namespace metaturtle::simd {
const KernelTable* avx2_kernels() { return nullptr; }
}  // namespace metaturtle::simd

#endif
