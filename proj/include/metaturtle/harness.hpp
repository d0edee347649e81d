#pragma once

// The outer training loop with periodic meta-validation, best-checkpoint
// selection, a single meta-test of the best checkpoint, multi-run aggregation
// and hyperparameter grid search.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "metaturtle/learners.hpp"
#include "metaturtle/tasks.hpp"

namespace metaturtle {

// An invalid configuration value; `key` is the config key (flag name with
// dashes replaced by underscores).
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(std::string key, const std::string& message)
      : std::invalid_argument(message), key_(std::move(key)) {}
  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

// Algorithm ids: maml, fomaml, lstm, lstm-enhanced, turtle, fo-turtle.
const std::vector<std::string>& algo_ids();

struct ExperimentConfig {
  std::string algo = "maml";
  std::size_t shots = 5;
  std::size_t inner_steps = 5;
  std::size_t meta_batch = 1;
  std::size_t train_tasks = 70000;
  std::size_t val_tasks = 1000;
  std::size_t test_tasks = 2000;
  std::size_t val_every = 2500;
  std::size_t runs = 30;
  std::uint64_t seed = 0;
  double outer_lr = 1e-3;
  // maml / fomaml
  double inner_lr = 0.01;
  // lstm / lstm-enhanced
  LstmInputMode lstm_input = LstmInputMode::log_preprocessed;
  // turtle / fo-turtle
  std::size_t meta_layers = 5;
  std::size_t meta_width = 20;
  bool loss_input = false;
  bool time_input = false;
  bool normalize_time = false;
  HistoryKind history = HistoryKind::none;
  double beta = 0.0;
  AlphaMode alpha = AlphaMode::fixed_ones;

  // Throws ConfigError naming the offending key.
  void validate() const;
  nlohmann::ordered_json to_json() const;

  // Defaults for `algo`, with inner_steps either given or the algorithm's
  // default. TURTLE at T = 1, 5, 10 gets the tuned input/history/beta/J.
  static ExperimentConfig defaults(const std::string& algo,
                                   std::optional<std::size_t> inner_steps = std::nullopt);
  // Defaults for j["algo"] and j["inner_steps"], then every other key of j on
  // top. Unknown keys, keys that do not apply to the algorithm and ill-typed
  // values throw ConfigError.
  static ExperimentConfig resolve(const nlohmann::ordered_json& j);
};

std::unique_ptr<Learner> make_learner(const ExperimentConfig& cfg);

TaskStreams make_streams(const ExperimentConfig& cfg);

struct CurvePoint {
  std::size_t tasks_seen = 0;
  double mse = 0.0;
};

struct RunRecord {
  std::size_t run = 0;
  std::uint64_t init_seed = 0;
  bool failed = false;
  std::string failure;
  std::vector<CurvePoint> curve;  // validation MSE, starting at tasks_seen = 0
  CurvePoint best;                // first argmin of the curve
  double test_mse = 0.0;          // best checkpoint on the test stream
  double wall_seconds = 0.0;
};

// derive_seed(master, "init", run)
std::uint64_t init_seed(std::uint64_t master, std::size_t run);

// Mean query MSE over a whole stream after adaptation; meta is not modified.
double evaluate_stream(const Learner& evaluation_learner, const ParamValues& meta,
                       const TaskStream& stream, const MlpSpec& base);

struct RunHooks {
  // Called after every validation point.
  std::function<void(std::size_t run, const CurvePoint&)> on_validation;
  // When set, checkpoints and metrics.csv go here.
  std::optional<std::filesystem::path> run_dir;
};

RunRecord train_run(const ExperimentConfig& cfg, std::size_t run, const TaskStreams& streams,
                    const RunHooks& hooks = {});

struct Summary {
  std::size_t n = 0;
  double mean = 0.0;
  double ci95 = 0.0;  // 1.96 * sample sd / sqrt(n); 0 for n = 1
  double median = 0.0;
  std::vector<double> values;
};

Summary summarize(const std::vector<double>& values);

struct Aggregate {
  Summary best_val;
  Summary test;
  std::vector<std::size_t> failed_runs;
};

// Throws std::runtime_error when every run failed.
Aggregate aggregate(const std::vector<RunRecord>& records);

struct ExperimentResult {
  std::vector<RunRecord> runs;
  std::optional<Aggregate> aggregate;  // absent when every run failed
  bool any_failed() const;
};

struct ExperimentOptions {
  std::size_t jobs = 1;
  std::optional<std::filesystem::path> out;  // results.json, timing.json, run_<i>/
  std::function<void(std::size_t run, const CurvePoint&)> on_validation;
};

ExperimentResult run_experiment(const ExperimentConfig& cfg, const ExperimentOptions& options = {});

nlohmann::ordered_json results_json(const ExperimentConfig& cfg, const ExperimentResult& result);
void write_metrics_csv(const RunRecord& record, const std::filesystem::path& path);

struct GridSpec {
  std::vector<bool> time_input{true, false};
  std::vector<HistoryKind> history{HistoryKind::gradients, HistoryKind::updates};
  std::vector<double> beta{0.0, 0.1, 0.2, 0.3, 0.4, 0.6, 0.8, 0.9, 0.95};
  std::vector<std::size_t> meta_batch{1, 2, 4, 8, 16, 32, 64};
  std::size_t size() const;
};

struct GridEntry {
  std::string setting;  // "time=yes,history=gradients,beta=0.9,J=2"
  ExperimentConfig config;
  std::optional<Aggregate> aggregate;
  std::size_t runs = 0;
  std::size_t failed = 0;
};

// Every setting on top of `base`, ranked by mean best validation MSE
// (ascending), then smaller J, then setting string. Settings whose runs all
// failed rank last.
std::vector<GridEntry> grid_search(const ExperimentConfig& base, const GridSpec& grid,
                                   const ExperimentOptions& options = {});
nlohmann::ordered_json grid_json(const std::vector<GridEntry>& ranked);

void write_json(const std::filesystem::path& path, const nlohmann::ordered_json& j);

}  // namespace metaturtle
