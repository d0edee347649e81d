#include "metaturtle/tensor.hpp"

#include <cmath>
#include <sstream>

#include "metaturtle/errors.hpp"
#include "metaturtle/simd/kernels.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace metaturtle {

#if defined(__GLIBC__)
namespace {
// Meta-network activations are a few hundred KB each and are allocated and
// freed constantly. With glibc's defaults every such block is a fresh mmap or
// a heap trim, and each reuse page-faults again; that doubled training time.
const bool kMallocTuned = [] {
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);
  return true;
}();
}  // namespace
#endif

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

Tensor::Tensor() : data_(1, 0.0) {}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_numel(shape_) != data_.size()) {
    throw ShapeError("tensor: shape " + shape_string(shape_) + " needs " +
                     std::to_string(shape_numel(shape_)) + " elements, got " +
                     std::to_string(data_.size()));
  }
}

Tensor Tensor::zeros(Shape shape) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n));
}

Tensor Tensor::full(Shape shape, double value) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor({}, {value}); }

Tensor Tensor::vector(std::vector<double> values) {
  const auto n = values.size();
  return Tensor({n}, std::move(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
  return Tensor({rows, cols}, std::move(values));
}

std::size_t Tensor::rows() const {
  if (rank() != 2) throw ShapeError("tensor: rows() needs rank 2, got " + shape_string(shape_));
  return shape_[0];
}

std::size_t Tensor::cols() const { return shape_.empty() ? 1 : shape_.back(); }

double Tensor::item() const {
  if (data_.size() != 1) {
    throw ShapeError("tensor: item() on shape " + shape_string(shape_));
  }
  return data_[0];
}

namespace {

const simd::KernelTable& k() { return simd::active(); }

Tensor checked(const char* op, Tensor t) {
  if (!k().all_finite(t.data().data(), t.numel())) throw NonFiniteError(op);
  return t;
}

void require_same(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

void require_rank(const char* op, const Tensor& a, std::size_t rank) {
  if (a.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_string(a.shape()));
  }
}

Tensor uninit_like(const Shape& shape) { return Tensor::zeros(shape); }

Tensor transposed(const Tensor& a) {
  const auto r = a.shape()[0], c = a.shape()[1];
  Tensor out = uninit_like({c, r});
  const double* src = a.data().data();
  double* dst = out.data().data();
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) dst[j * r + i] = src[i * c + j];
  }
  return out;
}

template <class Kernel>
Tensor binary(const char* op, const Tensor& a, const Tensor& b, Kernel kernel) {
  require_same(op, a, b);
  Tensor out = uninit_like(a.shape());
  kernel(a.data().data(), b.data().data(), out.data().data(), a.numel());
  return checked(op, std::move(out));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary("add", a, b, k().add); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary("sub", a, b, k().sub); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary("mul", a, b, k().mul); }

Tensor neg(const Tensor& a) {
  Tensor out = uninit_like(a.shape());
  k().scale(a.data().data(), -1.0, out.data().data(), a.numel());
  return out;
}

Tensor scale(const Tensor& a, double c) {
  Tensor out = uninit_like(a.shape());
  k().scale(a.data().data(), c, out.data().data(), a.numel());
  return checked("scale", std::move(out));
}

Tensor add_scalar(const Tensor& a, double c) {
  Tensor out = uninit_like(a.shape());
  k().add_scalar(a.data().data(), c, out.data().data(), a.numel());
  return checked("add_scalar", std::move(out));
}

Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_a, bool transpose_b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  const std::size_t m = transpose_a ? a.shape()[1] : a.shape()[0];
  const std::size_t ka = transpose_a ? a.shape()[0] : a.shape()[1];
  const std::size_t kb = transpose_b ? b.shape()[1] : b.shape()[0];
  const std::size_t n = transpose_b ? b.shape()[0] : b.shape()[1];
  if (ka != kb) {
    throw ShapeError("matmul: inner extents differ: " + shape_string(a.shape()) +
                     (transpose_a ? "^T" : "") + " x " + shape_string(b.shape()) +
                     (transpose_b ? "^T" : ""));
  }
  Tensor out = uninit_like({m, n});
  if (m * n == 0) return out;
  if (transpose_a && m > 1 && ka > 1 && n > 1) {
    const double* pb = b.data().data();
    const Tensor bt = transpose_b && kb > 1 ? transposed(b) : Tensor();
    if (transpose_b && kb > 1) pb = bt.data().data();
    k().matmul_tn(a.data().data(), pb, out.data().data(), m, ka, n);
    return checked("matmul", std::move(out));
  }
  // Vectors need no data movement to transpose.
  const bool move_a = transpose_a && m > 1 && ka > 1;
  const bool move_b = transpose_b && n > 1 && kb > 1;
  const Tensor at = move_a ? transposed(a) : Tensor();
  const Tensor bt = move_b ? transposed(b) : Tensor();
  const double* pa = move_a ? at.data().data() : a.data().data();
  const double* pb = move_b ? bt.data().data() : b.data().data();
  k().matmul(pa, pb, out.data().data(), m, ka, n);
  return checked("matmul", std::move(out));
}

Tensor concat_last(std::span<const Tensor> parts) {
  std::vector<const Tensor*> refs;
  refs.reserve(parts.size());
  for (const auto& p : parts) refs.push_back(&p);
  return concat_last(std::span<const Tensor* const>(refs));
}

Tensor concat_last(std::span<const Tensor* const> parts) {
  if (parts.empty()) throw ShapeError("concat_last: no inputs");
  const auto rank = parts[0]->rank();
  if (rank != 1 && rank != 2) {
    throw ShapeError("concat_last: rank must be 1 or 2, got " + shape_string(parts[0]->shape()));
  }
  const std::size_t rows = rank == 2 ? parts[0]->shape()[0] : 1;
  std::size_t total = 0;
  for (const Tensor* p : parts) {
    if (p->rank() != rank || (rank == 2 && p->shape()[0] != rows)) {
      throw ShapeError("concat_last: shape mismatch " + shape_string(parts[0]->shape()) +
                       " vs " + shape_string(p->shape()));
    }
    total += p->cols();
  }
  Tensor out = uninit_like(rank == 2 ? Shape{rows, total} : Shape{total});
  double* dst = out.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    for (const Tensor* p : parts) {
      const auto c = p->cols();
      const double* src = p->data().data() + r * c;
      for (std::size_t j = 0; j < c; ++j) *dst++ = src[j];
    }
  }
  return out;
}

Tensor slice_last(const Tensor& x, std::size_t begin, std::size_t end) {
  if (x.rank() != 1 && x.rank() != 2) {
    throw ShapeError("slice_last: rank must be 1 or 2, got " + shape_string(x.shape()));
  }
  const auto cols = x.cols();
  if (begin > end || end > cols) {
    throw ShapeError("slice_last: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") out of bounds for " + shape_string(x.shape()));
  }
  const std::size_t rows = x.rank() == 2 ? x.shape()[0] : 1;
  const std::size_t width = end - begin;
  Tensor out = uninit_like(x.rank() == 2 ? Shape{rows, width} : Shape{width});
  double* dst = out.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* src = x.data().data() + r * cols + begin;
    for (std::size_t j = 0; j < width; ++j) dst[r * width + j] = src[j];
  }
  return out;
}

Tensor broadcast(const Tensor& s, const Shape& shape) {
  if (s.numel() != 1) {
    throw ShapeError("broadcast: source must hold one element, got " + shape_string(s.shape()) +
                     " -> " + shape_string(shape));
  }
  return Tensor::full(shape, s[0]);
}

Tensor relu(const Tensor& x) {
  Tensor out = uninit_like(x.shape());
  k().relu(x.data().data(), out.data().data(), x.numel());
  return out;  // finite in, finite out
}

Tensor relu_mask(const Tensor& x) {
  Tensor out = uninit_like(x.shape());
  k().relu_mask(x.data().data(), out.data().data(), x.numel());
  return out;
}

Tensor sigmoid(const Tensor& x) {
  Tensor out = uninit_like(x.shape());
  auto src = x.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < src.size(); ++i) {
    const double v = src[i];
    if (v >= 0.0) {
      dst[i] = 1.0 / (1.0 + std::exp(-v));
    } else {
      const double e = std::exp(v);
      dst[i] = e / (1.0 + e);
    }
  }
  return checked("sigmoid", std::move(out));
}

Tensor sine(const Tensor& x) {
  Tensor out = uninit_like(x.shape());
  auto src = x.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = std::sin(src[i]);
  return checked("sine", std::move(out));
}

Tensor sum(const Tensor& x) {
  return checked("sum", Tensor::scalar(k().sum(x.data().data(), x.numel())));
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw ShapeError("mean: empty tensor");
  const double s = k().sum(x.data().data(), x.numel());
  return checked("mean", Tensor::scalar(s / static_cast<double>(x.numel())));
}

Tensor square(const Tensor& x) {
  Tensor out = uninit_like(x.shape());
  k().mul(x.data().data(), x.data().data(), out.data().data(), x.numel());
  return checked("square", std::move(out));
}

Tensor reshape(const Tensor& x, const Shape& shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_string(x.shape()) + " as " +
                     shape_string(shape));
  }
  return Tensor(shape, x.values());
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  require_rank("add_bias", x, 2);
  require_rank("add_bias", bias, 1);
  if (bias.shape()[0] != x.shape()[1]) {
    throw ShapeError("add_bias: shape mismatch " + shape_string(x.shape()) + " vs " +
                     shape_string(bias.shape()));
  }
  Tensor out = uninit_like(x.shape());
  k().add_bias(x.data().data(), bias.data().data(), out.data().data(), x.shape()[0],
               x.shape()[1]);
  return checked("add_bias", std::move(out));
}

Tensor sum_rows(const Tensor& x) {
  require_rank("sum_rows", x, 2);
  Tensor out = uninit_like({x.shape()[1]});
  k().sum_rows(x.data().data(), out.data().data(), x.shape()[0], x.shape()[1]);
  return checked("sum_rows", std::move(out));
}

Tensor repeat_rows(const Tensor& v, std::size_t rows) {
  require_rank("repeat_rows", v, 1);
  const auto cols = v.shape()[0];
  Tensor out = uninit_like({rows, cols});
  double* dst = out.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) dst[r * cols + c] = v[c];
  }
  return out;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  require_same("max_abs_diff", a, b);
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace metaturtle
