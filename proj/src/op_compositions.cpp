#include "metaturtle/op_compositions.hpp"

#include <vector>

#include "metaturtle/rng.hpp"

namespace metaturtle {
namespace {

Tensor random_tensor(Rng& rng, Shape shape, double lo, double hi) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(v));
}

enum class Extra { sigmoid, shifted_relu, scaled_square, neg, scale, add_scalar };

}  // namespace

Tensor random_point(std::uint64_t seed, std::size_t n) {
  Rng rng(derive_seed(seed, "point", n));
  return random_tensor(rng, {n}, -1.0, 1.0);
}

ScalarFunction random_composition(std::uint64_t seed) {
  Rng rng(derive_seed(seed, "composition", 0));
  const Tensor w1 = random_tensor(rng, {3, 4}, -1.0, 1.0);
  const Tensor w2 = random_tensor(rng, {4, 2}, -1.0, 1.0);
  const double shift = rng.uniform(-0.5, 0.5);
  const double mix = rng.uniform(0.2, 1.5);
  const double lift = rng.uniform(-1.0, 1.0);
  std::vector<std::pair<Extra, double>> extras;
  const auto chain = 1 + rng.next_u64() % 4;
  for (std::uint64_t i = 0; i < chain; ++i) {
    extras.emplace_back(static_cast<Extra>(rng.next_u64() % 6), rng.uniform(-0.8, 0.8));
  }

  return [=](Graph& g, GraphValue x) {
    auto X = reshape(x, {2, 3});
    auto H = add_bias(matmul(X, g.constant(w1)), slice_last(x, 1, 5));  // 2x4
    for (const auto& [kind, c] : extras) {
      switch (kind) {
        case Extra::sigmoid: H = sigmoid(H); break;
        case Extra::shifted_relu: H = add(relu(add_scalar(H, c)), scale(H, 0.25)); break;
        case Extra::scaled_square: H = scale(square(H), c); break;
        case Extra::neg: H = neg(H); break;
        case Extra::scale: H = scale(H, 1.0 + c); break;
        case Extra::add_scalar: H = add_scalar(H, c); break;
      }
    }
    auto A = sigmoid(H);
    auto B = relu(add_scalar(H, shift));
    auto E = add(mul(A, B), square(sub(A, scale(B, mix))));  // 2x4
    auto F = neg(matmul(E, g.constant(w2)));                 // 2x2
    auto G = matmul(X, F, true, false);                      // 3x2
    auto Gt = matmul(F, G, false, true);                     // 2x3
    auto cols = sum_rows(E);                                 // 4
    auto R = repeat_rows(cols, 2);                           // 2x4
    GraphValue parts[] = {E, R, Gt};
    auto cat = concat_last(parts);                           // 2x11
    auto S = slice_last(cat, 2, 9);
    auto total = sum(S);
    auto spread = broadcast(scale(total, 0.1), {2, 3});
    auto out = add(mean(mul(spread, Gt)), scale(mean(square(S)), lift));
    return add(out, sum(scale(X, 0.5)));
  };
}

}  // namespace metaturtle
