// Inner-loop learners, the gate construction, Adam and the outer step.

#include <cmath>

#include "doctest.h"
#include "metaturtle/errors.hpp"
#include "metaturtle/learners.hpp"
#include "metaturtle/verify.hpp"

using namespace metaturtle;

namespace {

// One scalar weight "w" bound as a trainable leaf.
ParamSet scalar_theta(Graph& g, double value) {
  ParamSet p;
  p.push_back("w", g.parameter(Tensor::vector({value})));
  return p;
}

double sigmoid_of(double x) { return 1.0 / (1.0 + std::exp(-x)); }

const MlpSpec kTiny{{1, 4, 1}};

SineTask some_task(std::size_t i = 0) { return TaskStream(Split::train, 10, 77, {}).at(i); }

}  // namespace

TEST_CASE("maml hand examples on L = theta^2") {
  const QuadraticObjective quad;
  Graph g;
  auto one = maml_adapt({1, 0.1, true}, scalar_theta(g, 1.0), quad);
  CHECK(one.theta.at("w").value()[0] == doctest::Approx(0.8).epsilon(1e-15));
  auto two = maml_adapt({2, 0.1, true}, scalar_theta(g, 1.0), quad);
  CHECK(two.theta.at("w").value()[0] == doctest::Approx(0.64).epsilon(1e-15));
  CHECK(two.trajectory.size() == 3);
  CHECK(two.query_loss.value().item() == doctest::Approx(0.64 * 0.64).epsilon(1e-15));
}

TEST_CASE("maml with zero step size returns theta") {
  const SineObjective objective(kTiny, some_task());
  const auto theta = init_params(kTiny, 3);
  Graph g;
  auto a = maml_adapt({4, 0.0, true}, bind_params(g, theta, true), objective);
  CHECK(values_of(a.theta) == theta);
  Graph h;
  CHECK(a.query_loss.value().item() ==
        objective.query_loss(h, bind_params(h, theta, false)).value().item());
}

TEST_CASE("config validation") {
  CHECK_THROWS_AS((MamlConfig{0, 0.1, true}.validate()), std::invalid_argument);
  CHECK_THROWS_AS((MamlConfig{1, -0.1, true}.validate()), std::invalid_argument);
  LstmMetaConfig lc;
  lc.input_mode = LstmInputMode::log_preprocessed;
  CHECK_THROWS_AS(lc.validate(), std::invalid_argument);
  lc.second_order = false;
  CHECK_NOTHROW(lc.validate());
  CHECK(lc.gate_input_width() == 6);
  TurtleConfig tc;
  tc.beta = 1.5;
  CHECK_THROWS_AS(tc.validate(), std::invalid_argument);
  tc.beta = 1.0;
  tc.hidden_layers = 0;
  CHECK_THROWS_AS(tc.validate(), std::invalid_argument);
  CHECK(parse_history("updates") == HistoryKind::updates);
  CHECK_THROWS_AS(parse_history("momentum"), std::invalid_argument);
}

TEST_CASE("turtle input width and meta-network shape") {
  TurtleConfig tc;
  CHECK(tc.input_width() == 1);
  tc.use_loss_input = tc.use_time_input = true;
  tc.history = HistoryKind::gradients;
  CHECK(tc.input_width() == 4);
  CHECK(tc.meta_spec().widths == std::vector<std::size_t>{4, 20, 20, 20, 20, 20, 1});
}

TEST_CASE("theorem construction") {
  const auto v = theorem1_construct(0.01, {});
  CHECK(v.b_i.item() == doctest::Approx(-4.5951198501).epsilon(1e-11));
  CHECK(v.b_f.item() == 20.0);
  CHECK(v.w_f == Tensor::zeros({1, 4}));
  CHECK(v.w_i == Tensor::zeros({1, 4}));
  CHECK(theorem1_construct(0.5, {}).b_i.item() == 0.0);
  CHECK(1.0 - sigmoid_of(20.0) <= 2.1e-9);
  for (double alpha : {0.001, 0.01, 0.1, 0.5, 0.9}) {
    CHECK(std::abs(sigmoid_of(theorem1_construct(alpha, {}).b_i.item()) - alpha) <= 1e-12);
  }
  CHECK_THROWS_AS(theorem1_construct(0.0, {}), std::invalid_argument);
  CHECK_THROWS_AS(theorem1_construct(1.0, {}), std::invalid_argument);
}

TEST_CASE("lstm with the construction follows gradient descent") {
  const auto r = verify::theorem1(0.01, 5, 10, 3);
  MESSAGE(verify::format(r));
  CHECK(r.passed);
}

TEST_CASE("lstm gates: closed input gate, saturated forget gate") {
  const SineObjective objective(kTiny, some_task());
  const auto theta = init_params(kTiny, 5);
  Graph g;
  LstmMetaConfig cfg;
  cfg.steps = 3;
  cfg.second_order = false;
  SUBCASE("b_i very negative, b_f very positive: weights stay put") {
    const LstmMetaParams p{bind_params(g, theta, false), g.constant(Tensor::zeros({1, 4})),
                           g.constant(Tensor::scalar(800.0)), g.constant(Tensor::zeros({1, 4})),
                           g.constant(Tensor::scalar(-800.0))};
    const auto a = lstm_adapt(cfg, p, objective);
    CHECK(values_of(a.theta) == theta);
  }
  SUBCASE("closed input gate only shrinks by the forget factor") {
    const LstmMetaParams p{bind_params(g, theta, false), g.constant(Tensor::zeros({1, 4})),
                           g.constant(Tensor::scalar(0.0)), g.constant(Tensor::zeros({1, 4})),
                           g.constant(Tensor::scalar(-800.0))};
    const auto a = lstm_adapt(cfg, p, objective);
    CHECK(max_abs_diff(a.trajectory[3], scale(a.trajectory[0], 0.125)) <= 1e-15);
  }
  SUBCASE("gate shape errors") {
    const LstmMetaParams p{bind_params(g, theta, false), g.constant(Tensor::zeros({1, 3})),
                           g.constant(Tensor::scalar(0.0)), g.constant(Tensor::zeros({1, 4})),
                           g.constant(Tensor::scalar(0.0))};
    CHECK_THROWS_AS(lstm_adapt(cfg, p, objective), ShapeError);
  }
}

TEST_CASE("log preprocessing") {
  auto [m, s] = log_preprocess(std::exp(-3.0));
  CHECK(m == doctest::Approx(-0.3));
  CHECK(s == 1.0);
  auto [m2, s2] = log_preprocess(-1.0);
  CHECK(m2 == 0.0);
  CHECK(s2 == -1.0);
  auto [m3, s3] = log_preprocess(1e-6);
  CHECK(m3 == -1.0);
  CHECK(s3 == doctest::Approx(std::exp(10.0) * 1e-6));
}

TEST_CASE("turtle history recursion") {
  // Meta-network that outputs its history column: zero weights except the
  // path from input column 1 (history) through one relu unit. With gradients
  // as history and beta, h1 = (1 - beta) g0, so the step-1 update is that value.
  const QuadraticObjective quad;
  for (double beta : {0.0, 0.9}) {
    TurtleConfig cfg;
    cfg.steps = 2;
    cfg.hidden_layers = 1;
    cfg.hidden_width = 1;
    cfg.history = HistoryKind::gradients;
    cfg.beta = beta;
    Graph g;
    ParamValues phi{{"layer0.weight", Tensor::matrix(2, 1, {0.0, 1.0})},
                    {"layer0.bias", Tensor::vector({0.0})},
                    {"layer1.weight", Tensor::matrix(1, 1, {1.0})},
                    {"layer1.bias", Tensor::vector({0.0})}};
    const TurtleParams p{scalar_theta(g, 1.0), bind_params(g, phi, false), std::nullopt};
    const auto a = turtle_adapt(cfg, p, quad);
    // step 0 sees h = 0, step 1 sees h = (1 - beta) * 2
    CHECK(a.trajectory[1][0] == 1.0);
    CHECK(a.trajectory[2][0] == doctest::Approx(1.0 + (1.0 - beta) * 2.0).epsilon(1e-15));
  }
  const double h = 0.9 * 0.0 + (1.0 - 0.9) * 1.0;
  CHECK(h == doctest::Approx(0.1));
}

TEST_CASE("turtle pass-through network reproduces gradient descent") {
  const auto r = verify::pass_through(4);
  MESSAGE(verify::format(r));
  CHECK(r.observed <= 1e-12);
}

TEST_CASE("divergence names the inner step") {
  const QuadraticObjective quad(1e300);
  Graph g;
  try {
    maml_adapt({3, 1.0, false}, scalar_theta(g, 1e10), quad);
    FAIL("expected divergence");
  } catch (const DivergenceError& e) {
    CHECK(e.step() == 0);
    CHECK(std::string(e.what()).find("inner step 0") != std::string::npos);
  }
}

TEST_CASE("meta_gradient attaches the task index to a divergence") {
  MamlLearner learner(kTiny, {2, 1e6, true});
  auto meta = learner.init(1);
  const SineObjective ok(kTiny, some_task(0));
  const QuadraticObjective bad(1e300);
  const Objective* batch[] = {&ok, &bad};
  try {
    meta_gradient(learner, meta, batch);
    FAIL("expected divergence");
  } catch (const DivergenceError& e) {
    CHECK(e.task() != DivergenceError::npos);
  }
}

TEST_CASE("batch meta-gradient is the sum of per-task gradients") {
  TurtleConfig tc;
  tc.steps = 2;
  tc.hidden_layers = 2;
  tc.use_time_input = true;
  tc.history = HistoryKind::gradients;
  tc.beta = 0.9;
  const MamlLearner maml(kTiny, {3, 0.05, true});
  const TurtleLearner turtle(kTiny, tc);
  for (const Learner* learner : {static_cast<const Learner*>(&maml), static_cast<const Learner*>(&turtle)}) {
    const auto meta = learner->init(2);
    std::vector<SineObjective> objectives;
    for (std::size_t i = 0; i < 4; ++i) objectives.emplace_back(kTiny, some_task(i));
    std::vector<const Objective*> batch;
    for (const auto& o : objectives) batch.push_back(&o);
    const auto total = meta_gradient(*learner, meta, batch);
    std::vector<Tensor> summed;
    double loss = 0.0;
    for (const auto* o : batch) {
      const auto single = meta_gradient(*learner, meta, std::span(&o, 1));
      loss += single.loss_sum;
      if (summed.empty()) {
        summed = single.grads;
      } else {
        for (std::size_t i = 0; i < summed.size(); ++i) summed[i] = add(summed[i], single.grads[i]);
      }
    }
    CHECK(total.loss_sum == loss);
    for (std::size_t i = 0; i < summed.size(); ++i) CHECK(total.grads[i] == summed[i]);
  }
}

TEST_CASE("single-task outer step equals a one-element batch") {
  const MamlLearner learner(kTiny, {2, 0.05, false});
  auto a = learner.init(3), b = learner.init(3);
  AdamState sa, sb;
  const SineObjective o(kTiny, some_task());
  const Objective* batch[] = {&o};
  const double la = outer_step(sa, a, batch, learner);
  const auto bg = meta_gradient(learner, b, batch);
  adam_update(sb, b, bg.grads);
  CHECK(la == bg.loss_sum);
  CHECK(a == b);
}

TEST_CASE("adam") {
  ParamValues p{{"x", Tensor::vector({1.0, -2.0})}, {"y", Tensor::scalar(3.0)}};
  const auto before = p;
  AdamState s;
  std::vector<Tensor> zero{Tensor::zeros({2}), Tensor::zeros({})};
  adam_update(s, p, zero);
  CHECK(p == before);
  CHECK(s.step == 1);
  // first step moves each coordinate by lr * sign(g) (up to epsilon)
  std::vector<Tensor> g{Tensor::vector({0.5, -4.0}), Tensor::scalar(1e-3)};
  AdamState t;
  adam_update(t, p, g);
  CHECK(p[0].value[0] == doctest::Approx(1.0 - 1e-3).epsilon(1e-9));
  CHECK(p[0].value[1] == doctest::Approx(-2.0 + 1e-3).epsilon(1e-9));
  CHECK(p[1].value[0] == doctest::Approx(3.0 - 1e-3).epsilon(1e-7));
  const auto j = adam_to_json(t);
  const auto back = adam_from_json(nlohmann::ordered_json::parse(j.dump()));
  CHECK(back.step == t.step);
  CHECK(back.m == t.m);
  CHECK(back.v == t.v);
  CHECK_THROWS_AS(adam_update(t, p, std::span(g.data(), 1)), std::invalid_argument);
}

TEST_CASE("evaluation never changes meta parameters and binds only theta as trainable") {
  const TurtleLearner learner(kTiny, {});
  const auto meta = learner.init(4);
  const auto copy = meta;
  const auto eval = learner.evaluation_copy();
  const SineObjective o(kTiny, some_task());
  const double loss = evaluate_query_loss(*eval, meta, o);
  CHECK(std::isfinite(loss));
  CHECK(meta == copy);
  CHECK(evaluate_query_loss(*eval, meta, o) == loss);
  Graph g;
  const auto bound = bind_meta(g, meta, false);
  for (std::size_t i = 0; i < bound.size(); ++i) {
    CHECK(bound.values[i].requires_grad() == (bound.names[i].rfind("theta/", 0) == 0));
  }
}

TEST_CASE("learner ids and initial meta parameters") {
  const auto base = MlpSpec::sine_base_learner();
  CHECK(MamlLearner(base, {}).algo() == "maml");
  CHECK(MamlLearner(base, {5, 0.01, false}).algo() == "fomaml");
  LstmMetaConfig lc;
  CHECK(LstmLearner(base, lc).algo() == "lstm-enhanced");
  lc.second_order = false;
  lc.input_mode = LstmInputMode::log_preprocessed;
  const LstmLearner lstm(base, lc);
  CHECK(lstm.algo() == "lstm");
  const auto gates = lstm.init(1);
  CHECK(gates.size() == 10);
  CHECK(gates[6].name == "gates/w_f");
  CHECK(gates[6].value.shape() == Shape{1, 6});
  CHECK(gates[7].value.item() >= 4.0);
  CHECK(gates[9].value.item() <= -4.0);
  TurtleConfig tc;
  tc.alpha_mode = AlphaMode::trainable;
  const auto t = TurtleLearner(base, tc).init(1);
  CHECK(t.back().name == "alpha/alpha");
  CHECK(t.back().value == Tensor::full({1761}, 1.0));
  tc.second_order = false;
  CHECK(TurtleLearner(base, tc).algo() == "fo-turtle");
}

TEST_CASE("verification checks for learners") {
  for (const auto& r : {verify::detachment(5), verify::meta_gradient_fd(5), verify::order_witness()}) {
    MESSAGE(verify::format(r));
    CHECK(r.passed);
  }
}
