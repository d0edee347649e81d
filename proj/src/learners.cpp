#include "metaturtle/learners.hpp"

#include <cmath>
#include <stdexcept>

#include "metaturtle/errors.hpp"
#include "metaturtle/rng.hpp"

namespace metaturtle {
namespace {

constexpr double kPreprocessP = 10.0;

Graph& graph_of(const ParamSet& params) {
  if (params.size() == 0) throw std::invalid_argument("learner: empty parameter set");
  return *params.values.front().graph();
}

// The weights as something grad() can target.
GraphValue differentiable(GraphValue w) {
  if (w.requires_grad()) return w;
  return w.graph()->parameter(w.value());
}

template <class F>
auto at_step(std::size_t step, F&& f) {
  try {
    return f();
  } catch (const NonFiniteError& e) {
    throw DivergenceError(step, e.what());
  }
}

struct SupportStep {
  GraphValue weights, loss, grad;
};

SupportStep support_step(const Objective& objective, const ParamLayout& layout, GraphValue flat,
                         bool create_graph) {
  SupportStep s;
  s.weights = differentiable(flat);
  s.loss = objective.support_loss(*flat.graph(), unflatten(layout, s.weights));
  s.grad = grad(s.loss, s.weights, create_graph);
  return s;
}

Adaptation finish(const Objective& objective, const ParamLayout& layout, GraphValue flat,
                  std::vector<Tensor> trajectory, std::size_t steps) {
  Adaptation out;
  out.theta = unflatten(layout, flat);
  out.trajectory = std::move(trajectory);
  out.query_loss = at_step(steps, [&] { return objective.query_loss(*flat.graph(), out.theta); });
  return out;
}

bool starts_with(std::string_view s, std::string_view prefix) {
  return s.substr(0, prefix.size()) == prefix;
}

}  // namespace

GraphValue SineObjective::support_loss(Graph& g, const ParamSet& theta) const {
  return mse_loss(forward(spec_, theta, g.constant(task_.support_x)), task_.support_y);
}

GraphValue SineObjective::query_loss(Graph& g, const ParamSet& theta) const {
  return mse_loss(forward(spec_, theta, g.constant(task_.query_x)), task_.query_y);
}

GraphValue QuadraticObjective::support_loss(Graph&, const ParamSet& theta) const {
  return scale(sum(square(flatten(theta))), c_);
}

GraphValue QuadraticObjective::query_loss(Graph& g, const ParamSet& theta) const {
  return support_loss(g, theta);
}

// ---------------------------------------------------------------- MAML

void MamlConfig::validate() const {
  if (steps == 0) throw std::invalid_argument("maml: inner steps must be >= 1");
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) {
    throw std::invalid_argument("maml: inner step size must be finite and >= 0");
  }
}

Adaptation maml_adapt(const MamlConfig& cfg, const ParamSet& theta, const Objective& objective) {
  cfg.validate();
  graph_of(theta);
  const auto layout = layout_of(theta);
  GraphValue flat = flatten(theta);
  std::vector<Tensor> trajectory{flat.value()};
  for (std::size_t t = 0; t < cfg.steps; ++t) {
    flat = at_step(t, [&] {
      auto s = support_step(objective, layout, flat, cfg.second_order);
      return sub(s.weights, scale(s.grad, cfg.alpha));
    });
    trajectory.push_back(flat.value());
  }
  return finish(objective, layout, flat, std::move(trajectory), cfg.steps);
}

// ------------------------------------------------------ meta-learner LSTM

void LstmMetaConfig::validate() const {
  if (steps == 0) throw std::invalid_argument("lstm: inner steps must be >= 1");
  if (input_mode == LstmInputMode::log_preprocessed && second_order) {
    throw std::invalid_argument(
        "lstm: log-preprocessed gate inputs are not differentiable; use first-order mode");
  }
  if (!std::isfinite(forget_history_init) || !std::isfinite(input_history_init)) {
    throw std::invalid_argument("lstm: gate history initial values must be finite");
  }
}

std::pair<double, double> log_preprocess(double x) {
  if (std::abs(x) >= std::exp(-kPreprocessP)) {
    return {std::log(std::abs(x)) / kPreprocessP, x > 0.0 ? 1.0 : -1.0};
  }
  return {-1.0, std::exp(kPreprocessP) * x};
}

Adaptation lstm_adapt(const LstmMetaConfig& cfg, const LstmMetaParams& p,
                      const Objective& objective) {
  cfg.validate();
  Graph& g = graph_of(p.theta0);
  const auto layout = layout_of(p.theta0);
  const std::size_t n = layout_numel(layout);
  const std::size_t width = cfg.gate_input_width();
  for (const auto* w : {&p.w_f, &p.w_i}) {
    if (w->shape() != Shape{1, width}) {
      throw ShapeError("lstm: gate weights must be " + shape_string({1, width}) + ", got " +
                       shape_string(w->shape()));
    }
  }
  for (const auto* b : {&p.b_f, &p.b_i}) {
    if (b->value().numel() != 1) {
      throw ShapeError("lstm: gate bias must have one element, got " + shape_string(b->shape()));
    }
  }

  const Shape col{n, 1};
  GraphValue c = flatten(p.theta0);
  GraphValue prev_f = g.constant(Tensor::full(col, cfg.forget_history_init));
  GraphValue prev_i = g.constant(Tensor::full(col, cfg.input_history_init));
  std::vector<Tensor> trajectory{c.value()};

  auto gate = [&](std::span<const GraphValue> features, GraphValue prev, GraphValue w,
                  GraphValue b) {
    std::vector<GraphValue> parts(features.begin(), features.end());
    parts.push_back(prev);
    auto pre = matmul(concat_last(parts), w, false, true);
    return sigmoid(add(pre, broadcast(b, col)));
  };

  for (std::size_t t = 0; t < cfg.steps; ++t) {
    at_step(t, [&] {
      auto s = support_step(objective, layout, c, cfg.second_order);
      auto g_col = reshape(s.grad, col);
      auto c_col = reshape(s.weights, col);
      std::vector<GraphValue> features;
      if (cfg.input_mode == LstmInputMode::raw) {
        auto loss = cfg.second_order ? s.loss : detach(s.loss);
        features = {g_col, broadcast(loss, col), c_col};
      } else {
        const auto lp = log_preprocess(s.loss.value().item());
        std::vector<double> pre(n * 4);
        for (std::size_t r = 0; r < n; ++r) {
          const auto gp = log_preprocess(s.grad.value()[r]);
          pre[4 * r] = gp.first;
          pre[4 * r + 1] = gp.second;
          pre[4 * r + 2] = lp.first;
          pre[4 * r + 3] = lp.second;
        }
        features = {g.constant(Tensor::matrix(n, 4, std::move(pre))), c_col};
      }
      auto f = gate(features, prev_f, p.w_f, p.b_f);
      auto i = gate(features, prev_i, p.w_i, p.b_i);
      c = reshape(add(mul(f, c_col), mul(i, neg(g_col))), {n});
      prev_f = f;
      prev_i = i;
      return 0;
    });
    trajectory.push_back(c.value());
  }
  return finish(objective, layout, c, std::move(trajectory), cfg.steps);
}

LstmMetaValues theorem1_construct(double alpha, ParamValues theta, LstmInputMode mode) {
  if (!(alpha > 0.0 && alpha < 1.0)) {
    throw std::invalid_argument("theorem construction needs 0 < alpha < 1");
  }
  LstmMetaConfig cfg;
  cfg.input_mode = mode;
  const std::size_t width = cfg.gate_input_width();
  LstmMetaValues v;
  v.theta0 = std::move(theta);
  v.w_f = Tensor::zeros({1, width});
  v.w_i = Tensor::zeros({1, width});
  v.b_f = Tensor::scalar(20.0);
  v.b_i = Tensor::scalar(-std::log((1.0 - alpha) / alpha));
  return v;
}

// ----------------------------------------------------------------- TURTLE

std::string_view history_name(HistoryKind h) {
  switch (h) {
    case HistoryKind::none: return "none";
    case HistoryKind::gradients: return "gradients";
    case HistoryKind::updates: return "updates";
  }
  return "?";
}

HistoryKind parse_history(std::string_view name) {
  for (auto h : {HistoryKind::none, HistoryKind::gradients, HistoryKind::updates}) {
    if (history_name(h) == name) return h;
  }
  throw std::invalid_argument("unknown history kind '" + std::string(name) +
                              "' (expected none, gradients or updates)");
}

std::size_t TurtleConfig::input_width() const {
  return 1 + (use_loss_input ? 1 : 0) + (use_time_input ? 1 : 0) +
         (history != HistoryKind::none ? 1 : 0);
}

MlpSpec TurtleConfig::meta_spec() const {
  MlpSpec spec;
  spec.widths.push_back(input_width());
  for (std::size_t l = 0; l < hidden_layers; ++l) spec.widths.push_back(hidden_width);
  spec.widths.push_back(1);
  return spec;
}

void TurtleConfig::validate() const {
  if (steps == 0) throw std::invalid_argument("turtle: inner steps must be >= 1");
  if (hidden_layers == 0) throw std::invalid_argument("turtle: meta-network needs >= 1 hidden layer");
  if (hidden_width == 0) throw std::invalid_argument("turtle: hidden width must be >= 1");
  if (!(beta >= 0.0 && beta <= 1.0)) throw std::invalid_argument("turtle: beta must lie in [0, 1]");
}

Adaptation turtle_adapt(const TurtleConfig& cfg, const TurtleParams& p,
                        const Objective& objective) {
  cfg.validate();
  Graph& g = graph_of(p.theta0);
  const auto layout = layout_of(p.theta0);
  const std::size_t n = layout_numel(layout);
  const MlpSpec spec = cfg.meta_spec();
  if (p.alpha && p.alpha->shape() != Shape{n}) {
    throw ShapeError("turtle: alpha must be " + shape_string({n}) + ", got " +
                     shape_string(p.alpha->shape()));
  }

  const Shape col{n, 1};
  GraphValue c = flatten(p.theta0);
  GraphValue h;
  if (cfg.history != HistoryKind::none) h = g.constant(Tensor::zeros(col));
  std::vector<Tensor> trajectory{c.value()};

  for (std::size_t t = 0; t < cfg.steps; ++t) {
    at_step(t, [&] {
      auto s = support_step(objective, layout, c, cfg.second_order);
      auto g_col = reshape(s.grad, col);
      std::vector<GraphValue> inputs{g_col};
      if (cfg.use_loss_input) {
        inputs.push_back(broadcast(cfg.second_order ? s.loss : detach(s.loss), col));
      }
      if (cfg.use_time_input) {
        const double time = cfg.normalize_time ? static_cast<double>(t) / cfg.steps
                                               : static_cast<double>(t);
        inputs.push_back(g.constant(Tensor::full(col, time)));
      }
      if (h.valid()) inputs.push_back(h);
      auto in = inputs.size() == 1 ? g_col : concat_last(inputs);
      auto update = reshape(forward(spec, p.phi, in), {n});
      if (p.alpha) update = mul(*p.alpha, update);
      c = add(s.weights, update);
      if (h.valid()) {
        auto v = cfg.history == HistoryKind::gradients ? g_col : reshape(update, col);
        if (!cfg.second_order) v = detach(v);
        h = add(scale(h, cfg.beta), scale(v, 1.0 - cfg.beta));
      }
      return 0;
    });
    trajectory.push_back(c.value());
  }
  return finish(objective, layout, c, std::move(trajectory), cfg.steps);
}

ParamValues pass_through_meta_network(double s) {
  return {
      {"layer0.weight", Tensor::matrix(1, 2, {1.0, -1.0})},
      {"layer0.bias", Tensor::vector({0.0, 0.0})},
      {"layer1.weight", Tensor::matrix(2, 1, {-s, s})},
      {"layer1.bias", Tensor::vector({0.0})},
  };
}

// -------------------------------------------------------------- learners

MamlLearner::MamlLearner(MlpSpec base, MamlConfig cfg) : base_(std::move(base)), cfg_(cfg) {
  base_.validate();
  cfg_.validate();
}

std::string MamlLearner::algo() const { return cfg_.second_order ? "maml" : "fomaml"; }

nlohmann::ordered_json MamlLearner::config_json() const {
  return {{"algo", algo()},
          {"inner_steps", cfg_.steps},
          {"inner_lr", cfg_.alpha},
          {"second_order", cfg_.second_order}};
}

ParamValues MamlLearner::init(std::uint64_t seed) const {
  return prefixed(init_params(base_, derive_seed(seed, "theta", 0)), "theta/");
}

Adaptation MamlLearner::adapt(const ParamSet& meta, const Objective& objective) const {
  return maml_adapt(cfg_, select(meta, "theta/"), objective);
}

std::unique_ptr<Learner> MamlLearner::evaluation_copy() const {
  auto cfg = cfg_;
  cfg.second_order = false;
  return std::make_unique<MamlLearner>(base_, cfg);
}

LstmLearner::LstmLearner(MlpSpec base, LstmMetaConfig cfg) : base_(std::move(base)), cfg_(cfg) {
  base_.validate();
  cfg_.validate();
}

std::string LstmLearner::algo() const {
  return cfg_.second_order && cfg_.input_mode == LstmInputMode::raw ? "lstm-enhanced" : "lstm";
}

nlohmann::ordered_json LstmLearner::config_json() const {
  return {{"algo", algo()},
          {"inner_steps", cfg_.steps},
          {"second_order", cfg_.second_order},
          {"input_mode", cfg_.input_mode == LstmInputMode::raw ? "raw" : "log_preprocessed"},
          {"forget_history_init", cfg_.forget_history_init},
          {"input_history_init", cfg_.input_history_init}};
}

ParamValues LstmLearner::init(std::uint64_t seed) const {
  LstmMetaValues v;
  v.theta0 = init_params(base_, derive_seed(seed, "theta", 0));
  Rng rng(derive_seed(seed, "gates", 0));
  const std::size_t width = cfg_.gate_input_width();
  auto weights = [&] {
    std::vector<double> w(width);
    for (auto& x : w) x = rng.uniform(-0.01, 0.01);
    return Tensor::matrix(1, width, std::move(w));
  };
  v.w_f = weights();
  v.b_f = Tensor::scalar(rng.uniform(4.0, 6.0));
  v.w_i = weights();
  v.b_i = Tensor::scalar(rng.uniform(-5.0, -4.0));
  return to_meta(v);
}

ParamValues LstmLearner::to_meta(const LstmMetaValues& v) {
  auto out = prefixed(v.theta0, "theta/");
  out.push_back({"gates/w_f", v.w_f});
  out.push_back({"gates/b_f", v.b_f});
  out.push_back({"gates/w_i", v.w_i});
  out.push_back({"gates/b_i", v.b_i});
  return out;
}

LstmMetaParams LstmLearner::from_meta(const ParamSet& meta) {
  return {select(meta, "theta/"), meta.at("gates/w_f"), meta.at("gates/b_f"),
          meta.at("gates/w_i"), meta.at("gates/b_i")};
}

Adaptation LstmLearner::adapt(const ParamSet& meta, const Objective& objective) const {
  return lstm_adapt(cfg_, from_meta(meta), objective);
}

std::unique_ptr<Learner> LstmLearner::evaluation_copy() const {
  auto cfg = cfg_;
  cfg.second_order = false;
  return std::make_unique<LstmLearner>(base_, cfg);
}

TurtleLearner::TurtleLearner(MlpSpec base, TurtleConfig cfg) : base_(std::move(base)), cfg_(cfg) {
  base_.validate();
  cfg_.validate();
}

std::string TurtleLearner::algo() const { return cfg_.second_order ? "turtle" : "fo-turtle"; }

nlohmann::ordered_json TurtleLearner::config_json() const {
  return {{"algo", algo()},
          {"inner_steps", cfg_.steps},
          {"second_order", cfg_.second_order},
          {"hidden_layers", cfg_.hidden_layers},
          {"hidden_width", cfg_.hidden_width},
          {"loss_input", cfg_.use_loss_input},
          {"time_input", cfg_.use_time_input},
          {"normalize_time", cfg_.normalize_time},
          {"history", history_name(cfg_.history)},
          {"beta", cfg_.beta},
          {"alpha", cfg_.alpha_mode == AlphaMode::trainable ? "trainable" : "fixed"}};
}

ParamValues TurtleLearner::init(std::uint64_t seed) const {
  auto out = prefixed(init_params(base_, derive_seed(seed, "theta", 0)), "theta/");
  for (auto& p : prefixed(init_params(cfg_.meta_spec(), derive_seed(seed, "phi", 0)), "phi/")) {
    out.push_back(std::move(p));
  }
  if (cfg_.alpha_mode == AlphaMode::trainable) {
    out.push_back({"alpha/alpha", Tensor::full({base_.param_count()}, 1.0)});
  }
  return out;
}

Adaptation TurtleLearner::adapt(const ParamSet& meta, const Objective& objective) const {
  TurtleParams p{select(meta, "theta/"), select(meta, "phi/"), std::nullopt};
  if (cfg_.alpha_mode == AlphaMode::trainable) p.alpha = meta.at("alpha/alpha");
  return turtle_adapt(cfg_, p, objective);
}

std::unique_ptr<Learner> TurtleLearner::evaluation_copy() const {
  auto cfg = cfg_;
  cfg.second_order = false;
  return std::make_unique<TurtleLearner>(base_, cfg);
}

// -------------------------------------------------------------- outer loop

void adam_update(AdamState& s, ParamValues& params, std::span<const Tensor> grads) {
  if (grads.size() != params.size()) {
    throw std::invalid_argument("adam: " + std::to_string(grads.size()) + " gradients for " +
                                std::to_string(params.size()) + " parameters");
  }
  if (s.m.empty()) {
    for (const auto& p : params) {
      s.m.push_back(Tensor::zeros(p.value.shape()));
      s.v.push_back(Tensor::zeros(p.value.shape()));
    }
  }
  ++s.step;
  const double bc1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
  const double bc2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i].value;
    if (grads[i].shape() != p.shape() || s.m[i].shape() != p.shape()) {
      throw ShapeError("adam: gradient " + shape_string(grads[i].shape()) + " for parameter '" +
                       params[i].name + "' " + shape_string(p.shape()));
    }
    auto m = s.m[i].data();
    auto v = s.v[i].data();
    auto w = p.data();
    const auto gr = grads[i].data();
    for (std::size_t k = 0; k < w.size(); ++k) {
      m[k] = s.beta1 * m[k] + (1.0 - s.beta1) * gr[k];
      v[k] = s.beta2 * v[k] + (1.0 - s.beta2) * gr[k] * gr[k];
      w[k] -= s.lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + s.epsilon);
    }
  }
}

nlohmann::ordered_json adam_to_json(const AdamState& s) {
  auto moments = [](const std::vector<Tensor>& ts) {
    auto arr = nlohmann::ordered_json::array();
    for (const auto& t : ts) arr.push_back({{"shape", t.shape()}, {"data", t.values()}});
    return arr;
  };
  return {{"step", s.step},   {"lr", s.lr},         {"beta1", s.beta1}, {"beta2", s.beta2},
          {"epsilon", s.epsilon}, {"m", moments(s.m)}, {"v", moments(s.v)}};
}

AdamState adam_from_json(const nlohmann::ordered_json& j) {
  AdamState s;
  s.step = j.at("step").get<std::size_t>();
  s.lr = j.at("lr").get<double>();
  s.beta1 = j.at("beta1").get<double>();
  s.beta2 = j.at("beta2").get<double>();
  s.epsilon = j.at("epsilon").get<double>();
  for (const auto& t : j.at("m")) s.m.emplace_back(t.at("shape").get<Shape>(), t.at("data").get<std::vector<double>>());
  for (const auto& t : j.at("v")) s.v.emplace_back(t.at("shape").get<Shape>(), t.at("data").get<std::vector<double>>());
  return s;
}

ParamSet bind_meta(Graph& g, const ParamValues& meta, bool training) {
  ParamSet out;
  for (const auto& p : meta) {
    const bool trainable = training || starts_with(p.name, "theta/");
    out.push_back(p.name, trainable ? g.parameter(p.value) : g.constant(p.value));
  }
  return out;
}

BatchGradient meta_gradient(const Learner& learner, const ParamValues& meta,
                            std::span<const Objective* const> batch) {
  BatchGradient out;
  for (const auto& p : meta) out.grads.push_back(Tensor::zeros(p.value.shape()));
  for (std::size_t j = 0; j < batch.size(); ++j) {
    std::size_t steps = 0;
    try {
      Graph g;
      const auto bound = bind_meta(g, meta, true);
      const auto a = learner.adapt(bound, *batch[j]);
      steps = a.trajectory.size() - 1;
      const auto grads = grad(a.query_loss, bound.values);
      for (std::size_t i = 0; i < grads.size(); ++i) {
        out.grads[i] = add(out.grads[i], grads[i].value());
      }
      out.loss_sum += a.query_loss.value().item();
    } catch (const DivergenceError& e) {
      throw e.with_task(j);
    } catch (const NonFiniteError& e) {
      throw DivergenceError(steps, e.what(), j);
    }
  }
  return out;
}

double outer_step(AdamState& adam, ParamValues& meta, std::span<const Objective* const> batch,
                  const Learner& learner) {
  auto bg = meta_gradient(learner, meta, batch);
  adam_update(adam, meta, bg.grads);
  return bg.loss_sum;
}

double evaluate_query_loss(const Learner& evaluation_learner, const ParamValues& meta,
                           const Objective& objective) {
  Graph g;
  const auto bound = bind_meta(g, meta, false);
  return evaluation_learner.adapt(bound, objective).query_loss.value().item();
}

}  // namespace metaturtle
