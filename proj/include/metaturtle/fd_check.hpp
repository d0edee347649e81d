#pragma once

#include <functional>

#include "metaturtle/autodiff.hpp"

namespace metaturtle {

// Builds a scalar from the parameter `x` inside graph `g`.
using ScalarFunction = std::function<GraphValue(Graph& g, GraphValue x)>;

// Compares engine derivatives of f at x against central differences.
//   order 1: grad(f) vs (f(x + eps e_i) - f(x - eps e_i)) / 2eps
//   order 2: grad(grad(f)_i) vs central differences of the analytic gradient
// Returns max |analytic - numeric| / max(1, |numeric|) over all coordinates.
// Throws NonFiniteError when any evaluation is not finite.
double finite_difference_check(const ScalarFunction& f, const Tensor& x, int order, double eps);

}  // namespace metaturtle
