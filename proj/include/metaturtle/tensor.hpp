#pragma once

// Dense row-major float64 tensors and the value-level operations that back the
// autodiff graph. Every operation validates shapes and rejects non-finite
// results.

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace metaturtle {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

class Tensor {
 public:
  // Rank-0 zero.
  Tensor();
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);
  static Tensor vector(std::vector<double> values);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t numel() const noexcept { return data_.size(); }
  // Leading extent of a rank-2 tensor.
  std::size_t rows() const;
  // Last extent; 1 for a scalar.
  std::size_t cols() const;

  std::span<const double> data() const noexcept { return data_; }
  std::span<double> data() noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }
  // The single element of a one-element tensor.
  double item() const;

  bool operator==(const Tensor& other) const = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

// Value-level operation set. Elementwise binaries require identical shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
// op(A) * op(B) where op transposes when the flag is set; both operands rank 2.
Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_a = false,
              bool transpose_b = false);
// Concatenate along the last axis. Rank-1 parts join end to end; rank-2 parts
// must share their row count.
Tensor concat_last(std::span<const Tensor> parts);
Tensor concat_last(std::span<const Tensor* const> parts);
// [begin, end) along the last axis.
Tensor slice_last(const Tensor& x, std::size_t begin, std::size_t end);
// One-element tensor replicated to `shape`.
Tensor broadcast(const Tensor& s, const Shape& shape);
Tensor relu(const Tensor& x);
// 1 where x > 0, else 0 (relu'(0) is defined as 0).
Tensor relu_mask(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor sine(const Tensor& x);
// Rank-0 results.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor square(const Tensor& x);
Tensor reshape(const Tensor& x, const Shape& shape);
// x[r, c] + bias[c]; x rank 2, bias rank 1 of length cols.
Tensor add_bias(const Tensor& x, const Tensor& bias);
// Column sums of a rank-2 tensor as a rank-1 tensor.
Tensor sum_rows(const Tensor& x);
// Stack a rank-1 tensor `rows` times into a rows x len matrix.
Tensor repeat_rows(const Tensor& v, std::size_t rows);

// Largest absolute elementwise difference; shapes must match.
double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace metaturtle
