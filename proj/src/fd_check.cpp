#include "metaturtle/fd_check.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace metaturtle {
namespace {

double value_at(const ScalarFunction& f, const Tensor& x) {
  Graph g;
  return f(g, g.parameter(x)).value().item();
}

Tensor gradient_at(const ScalarFunction& f, const Tensor& x) {
  Graph g;
  auto p = g.parameter(x);
  return grad(f(g, p), p).value();
}

Tensor shifted(const Tensor& x, std::size_t i, double delta) {
  Tensor y = x;
  y[i] += delta;
  return y;
}

double rel_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1.0, std::abs(numeric));
}

}  // namespace

double finite_difference_check(const ScalarFunction& f, const Tensor& x, int order, double eps) {
  if (!(eps > 0.0)) throw std::invalid_argument("finite_difference_check: eps must be positive");
  const std::size_t n = x.numel();
  double worst = 0.0;

  if (order == 1) {
    const Tensor analytic = gradient_at(f, x);
    for (std::size_t i = 0; i < n; ++i) {
      const double numeric =
          (value_at(f, shifted(x, i, eps)) - value_at(f, shifted(x, i, -eps))) / (2.0 * eps);
      worst = std::max(worst, rel_error(analytic[i], numeric));
    }
    return worst;
  }
  if (order != 2) throw std::invalid_argument("finite_difference_check: order must be 1 or 2");

  // hessian[i * n + j] = d/dx_j (df/dx_i)
  std::vector<double> hessian(n * n, 0.0);
  {
    Graph g;
    auto p = g.parameter(x);
    auto first = reshape(grad(f(g, p), p, /*create_graph=*/true), {n});
    for (std::size_t i = 0; i < n; ++i) {
      auto component = sum(slice_last(first, i, i + 1));
      if (!component.requires_grad()) continue;  // gradient constant in x
      const Tensor row = grad(component, p).value();
      for (std::size_t j = 0; j < n; ++j) hessian[i * n + j] = row[j];
    }
  }
  for (std::size_t j = 0; j < n; ++j) {
    const Tensor up = gradient_at(f, shifted(x, j, eps));
    const Tensor down = gradient_at(f, shifted(x, j, -eps));
    for (std::size_t i = 0; i < n; ++i) {
      const double numeric = (up[i] - down[i]) / (2.0 * eps);
      worst = std::max(worst, rel_error(hessian[i * n + j], numeric));
    }
  }
  return worst;
}

}  // namespace metaturtle
