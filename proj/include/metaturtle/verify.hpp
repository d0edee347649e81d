#pragma once

// Executable correctness checks shared by `metaturtle verify` and the
// acceptance suite. Each check reports the observed error next to its bound.

#include <cstdint>
#include <string>
#include <vector>

namespace metaturtle::verify {

struct CheckResult {
  std::string name;
  bool passed = false;
  double observed = 0.0;   // worst error (or 0/1 for exact checks)
  double tolerance = 0.0;
  std::string detail;
};

// Max relative error of engine derivatives vs central differences over
// `count` random op compositions (order 1 bound 1e-5, order 2 bound 1e-4).
CheckResult fd_suite(int order, std::size_t count = 100, std::uint64_t seed = 1);

// lstm_adapt under the gradient-descent gate construction vs maml_adapt:
// max per-coordinate trajectory deviation over `tasks` sine tasks and `steps`
// steps (bound 1e-6). The detail line reports b_i.
CheckResult theorem1(double alpha = 0.01, std::size_t tasks = 20, std::size_t steps = 10,
                     std::uint64_t seed = 1);

// turtle_adapt with the pass-through meta-network vs maml_adapt, for step
// sizes 1 (tiny base-learner) and 0.01 (sine base-learner); bound 1e-12.
CheckResult pass_through(std::uint64_t seed = 1);

// Streams, initialisers and short outer loops replay bit for bit.
CheckResult seeding_determinism(std::uint64_t seed = 1);

// First-order meta-gradients of every learner equal a hand-built reference
// that feeds inner gradients, losses and histories in as constants.
CheckResult detachment(std::uint64_t seed = 1);

// Second-order meta-gradients of every learner vs finite differences on a
// 1-4-1 base-learner with T <= 3 (bound 1e-4).
CheckResult meta_gradient_fd(std::uint64_t seed = 1);

// On L(theta) = theta^2 the second-order MAML meta-gradient is (1 - 2 alpha)^T
// times the first-order one (bound 1e-10).
CheckResult order_witness();

struct SuiteOptions {
  double theorem_alpha = 0.01;
  bool break_detach = false;
  std::uint64_t seed = 1;
};

std::vector<CheckResult> run_suite(const SuiteOptions& options);

std::string format(const CheckResult& r);

}  // namespace metaturtle::verify
