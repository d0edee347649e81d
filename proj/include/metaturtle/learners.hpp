#pragma once

// Inner-loop learners (MAML, the coordinate-wise meta-learner LSTM, TURTLE),
// the outer Adam update, and the LSTM parameterisation that reproduces
// gradient descent.
//
// Every learner adapts a flat vector of the n base-learner weights. Meta
// parameters are stored as one ParamValues whose names carry a component
// prefix: "theta/" (initialisation), "gates/" (LSTM), "phi/" (TURTLE
// meta-network) and "alpha/" (TURTLE per-parameter learning rates).

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "metaturtle/autodiff.hpp"
#include "metaturtle/mlp.hpp"
#include "metaturtle/tasks.hpp"

namespace metaturtle {

// Support and query losses of one episode, built inside the caller's graph.
class Objective {
 public:
  virtual ~Objective() = default;
  virtual GraphValue support_loss(Graph& g, const ParamSet& theta) const = 0;
  virtual GraphValue query_loss(Graph& g, const ParamSet& theta) const = 0;
};

// MSE of an MLP base-learner on a sine episode.
class SineObjective final : public Objective {
 public:
  SineObjective(MlpSpec spec, SineTask task) : spec_(std::move(spec)), task_(std::move(task)) {}
  GraphValue support_loss(Graph& g, const ParamSet& theta) const override;
  GraphValue query_loss(Graph& g, const ParamSet& theta) const override;
  const SineTask& task() const { return task_; }

 private:
  MlpSpec spec_;
  SineTask task_;
};

// L(theta) = c * sum of squared weights, for support and query alike.
class QuadraticObjective final : public Objective {
 public:
  explicit QuadraticObjective(double c = 1.0) : c_(c) {}
  GraphValue support_loss(Graph& g, const ParamSet& theta) const override;
  GraphValue query_loss(Graph& g, const ParamSet& theta) const override;

 private:
  double c_;
};

struct Adaptation {
  ParamSet theta;                  // adapted weights after the last step
  GraphValue query_loss;
  std::vector<Tensor> trajectory;  // flat weights before step 0 .. after step T-1
};

// ---------------------------------------------------------------- MAML

struct MamlConfig {
  std::size_t steps = 5;
  double alpha = 0.01;
  bool second_order = true;
  void validate() const;
};

// theta <- theta - alpha * grad L_support(theta), `steps` times.
Adaptation maml_adapt(const MamlConfig& cfg, const ParamSet& theta, const Objective& objective);

// ------------------------------------------------------ meta-learner LSTM

enum class LstmInputMode { raw, log_preprocessed };

struct LstmMetaConfig {
  std::size_t steps = 5;
  bool second_order = true;
  LstmInputMode input_mode = LstmInputMode::raw;
  double forget_history_init = 1.0;  // f^(-1)
  double input_history_init = 0.01;  // i^(-1)

  // Columns of the per-coordinate gate input: [grad, loss, weight, previous gate]
  // raw; gradient and loss expand to (magnitude, sign) pairs when preprocessed.
  std::size_t gate_input_width() const { return input_mode == LstmInputMode::raw ? 4 : 6; }
  void validate() const;
};

// Gate parameters are shared by all coordinates: w_* is 1 x width, b_* is rank 0.
struct LstmMetaParams {
  ParamSet theta0;
  GraphValue w_f, b_f, w_i, b_i;
};

struct LstmMetaValues {
  ParamValues theta0;
  Tensor w_f, b_f, w_i, b_i;
};

// c <- sigmoid(W_f u_f + b_f) * c + sigmoid(W_i u_i + b_i) * (-grad), per coordinate.
Adaptation lstm_adapt(const LstmMetaConfig& cfg, const LstmMetaParams& params,
                      const Objective& objective);

// Gates that make lstm_adapt follow gradient descent with step alpha:
// W = 0, b_f = 20, b_i = -ln((1 - alpha) / alpha). Requires 0 < alpha < 1.
LstmMetaValues theorem1_construct(double alpha, ParamValues theta,
                                  LstmInputMode mode = LstmInputMode::raw);

// Magnitude/sign preprocessing with p = 10:
// |x| >= e^-p -> (log|x| / p, sign x), otherwise (-1, e^p x).
std::pair<double, double> log_preprocess(double x);

// ----------------------------------------------------------------- TURTLE

enum class HistoryKind { none, gradients, updates };
enum class AlphaMode { fixed_ones, trainable };

std::string_view history_name(HistoryKind h);
HistoryKind parse_history(std::string_view name);

struct TurtleConfig {
  std::size_t steps = 5;
  std::size_t hidden_layers = 5;
  std::size_t hidden_width = 20;
  bool use_loss_input = false;
  bool use_time_input = false;
  bool normalize_time = false;  // feed t / steps instead of t
  HistoryKind history = HistoryKind::none;
  double beta = 0.0;
  AlphaMode alpha_mode = AlphaMode::fixed_ones;
  bool second_order = true;

  // d = 1 + loss + time + (history != none)
  std::size_t input_width() const;
  MlpSpec meta_spec() const;
  void validate() const;
};

struct TurtleParams {
  ParamSet theta0;
  ParamSet phi;
  std::optional<GraphValue> alpha;  // length n; implicit ones when absent
};

// theta <- theta + alpha * g_phi(I), I = [grad, loss?, t?, h?] row per coordinate;
// h <- beta h + (1 - beta) v with v the gradients or the updates.
Adaptation turtle_adapt(const TurtleConfig& cfg, const TurtleParams& params,
                        const Objective& objective);

// Weights of the 1-2-1 network relu(x) * -s + relu(-x) * s = -s x. With
// hidden_layers = 1, hidden_width = 2 and gradient-only input, TURTLE then
// takes gradient-descent steps of size s.
ParamValues pass_through_meta_network(double s = 1.0);

// -------------------------------------------------------------- learners

// A meta-learning algorithm: owns its configuration and knows how to bind its
// meta parameters.
class Learner {
 public:
  virtual ~Learner() = default;
  virtual std::string algo() const = 0;
  virtual nlohmann::ordered_json config_json() const = 0;
  virtual ParamValues init(std::uint64_t seed) const = 0;
  // Adapts to one episode. `meta` holds every meta parameter (with prefixes).
  virtual Adaptation adapt(const ParamSet& meta, const Objective& objective) const = 0;
  // The same learner with trajectory gradients switched off; used for
  // evaluation, where only values are needed.
  virtual std::unique_ptr<Learner> evaluation_copy() const = 0;
};

class MamlLearner final : public Learner {
 public:
  MamlLearner(MlpSpec base, MamlConfig cfg);
  std::string algo() const override;
  nlohmann::ordered_json config_json() const override;
  ParamValues init(std::uint64_t seed) const override;
  Adaptation adapt(const ParamSet& meta, const Objective& objective) const override;
  std::unique_ptr<Learner> evaluation_copy() const override;
  const MamlConfig& config() const { return cfg_; }

 private:
  MlpSpec base_;
  MamlConfig cfg_;
};

class LstmLearner final : public Learner {
 public:
  LstmLearner(MlpSpec base, LstmMetaConfig cfg);
  std::string algo() const override;
  nlohmann::ordered_json config_json() const override;
  // theta from the base initialiser; W ~ U(-0.01, 0.01), b_f ~ U(4, 6), b_i ~ U(-5, -4).
  ParamValues init(std::uint64_t seed) const override;
  Adaptation adapt(const ParamSet& meta, const Objective& objective) const override;
  std::unique_ptr<Learner> evaluation_copy() const override;
  const LstmMetaConfig& config() const { return cfg_; }

  static ParamValues to_meta(const LstmMetaValues& values);
  static LstmMetaParams from_meta(const ParamSet& meta);

 private:
  MlpSpec base_;
  LstmMetaConfig cfg_;
};

class TurtleLearner final : public Learner {
 public:
  TurtleLearner(MlpSpec base, TurtleConfig cfg);
  std::string algo() const override;
  nlohmann::ordered_json config_json() const override;
  ParamValues init(std::uint64_t seed) const override;
  Adaptation adapt(const ParamSet& meta, const Objective& objective) const override;
  std::unique_ptr<Learner> evaluation_copy() const override;
  const TurtleConfig& config() const { return cfg_; }

 private:
  MlpSpec base_;
  TurtleConfig cfg_;
};

// -------------------------------------------------------------- outer loop

struct AdamState {
  std::size_t step = 0;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::vector<Tensor> m, v;  // one per meta parameter, created on first use
};

void adam_update(AdamState& state, ParamValues& params, std::span<const Tensor> grads);
nlohmann::ordered_json adam_to_json(const AdamState& state);
AdamState adam_from_json(const nlohmann::ordered_json& j);

// Binds meta parameters into `g`. For training every entry is trainable; for
// evaluation only "theta/" entries are (inner gradients need them).
ParamSet bind_meta(Graph& g, const ParamValues& meta, bool training);

struct BatchGradient {
  double loss_sum = 0.0;
  std::vector<Tensor> grads;  // aligned with the meta parameters
};

// Gradient of sum_j L_query,j over the batch. Tasks are processed and their
// gradients accumulated in ascending index order. A divergence is rethrown
// with the task index attached.
BatchGradient meta_gradient(const Learner& learner, const ParamValues& meta,
                            std::span<const Objective* const> batch);

// One Adam update from the batch; returns the summed query loss.
double outer_step(AdamState& adam, ParamValues& meta, std::span<const Objective* const> batch,
                  const Learner& learner);

// Query loss after adaptation, without touching `meta`.
double evaluate_query_loss(const Learner& evaluation_learner, const ParamValues& meta,
                           const Objective& objective);

}  // namespace metaturtle
