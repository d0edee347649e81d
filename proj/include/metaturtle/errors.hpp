#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace metaturtle {

// Operand shapes do not conform for the named operation.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// An operation produced NaN or infinity.
class NonFiniteError : public std::runtime_error {
 public:
  explicit NonFiniteError(const std::string& op)
      : std::runtime_error("non-finite result in op '" + op + "'"), op_(op) {}
  const std::string& op() const noexcept { return op_; }

 private:
  std::string op_;
};

// Misuse of grad(): non-scalar output, non-differentiable op on the path, etc.
class GradError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Inner-loop adaptation produced a non-finite loss or value. `step` is the
// inner step; `task` is the index within the meta-batch once known.
class DivergenceError : public std::runtime_error {
 public:
  static constexpr std::size_t npos = static_cast<std::size_t>(-1);

  DivergenceError(std::size_t step, const std::string& what, std::size_t task = npos)
      : std::runtime_error(describe(step, what, task)), step_(step), task_(task), what_(what) {}

  std::size_t step() const noexcept { return step_; }
  std::size_t task() const noexcept { return task_; }
  DivergenceError with_task(std::size_t task) const { return {step_, what_, task}; }

 private:
  static std::string describe(std::size_t step, const std::string& what, std::size_t task) {
    std::string s = "divergence at inner step " + std::to_string(step);
    if (task != npos) s += " of task " + std::to_string(task);
    return s + ": " + what;
  }
  std::size_t step_;
  std::size_t task_;
  std::string what_;
};

}  // namespace metaturtle
