#include "metaturtle/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <numeric>
#include <set>
#include <thread>

#include "metaturtle/errors.hpp"
#include "metaturtle/rng.hpp"

namespace metaturtle {
namespace {

using json = nlohmann::ordered_json;

bool is_turtle(const std::string& algo) { return algo == "turtle" || algo == "fo-turtle"; }
bool is_lstm(const std::string& algo) { return algo == "lstm" || algo == "lstm-enhanced"; }
bool is_maml(const std::string& algo) { return algo == "maml" || algo == "fomaml"; }

std::size_t get_count(const std::string& key, const json& v) {
  if (v.is_number_unsigned()) return v.get<std::size_t>();
  if (v.is_number_integer() && v.get<long long>() >= 0) return v.get<std::size_t>();
  throw ConfigError(key, "'" + key + "' must be a non-negative integer, got " + v.dump());
}

double get_number(const std::string& key, const json& v) {
  if (!v.is_number()) throw ConfigError(key, "'" + key + "' must be a number, got " + v.dump());
  return v.get<double>();
}

bool get_bool(const std::string& key, const json& v) {
  if (v.is_boolean()) return v.get<bool>();
  if (v.is_string()) {
    const auto s = v.get<std::string>();
    if (s == "yes" || s == "true") return true;
    if (s == "no" || s == "false") return false;
  }
  throw ConfigError(key, "'" + key + "' must be yes/no or a boolean, got " + v.dump());
}

std::string get_string(const std::string& key, const json& v) {
  if (!v.is_string()) throw ConfigError(key, "'" + key + "' must be a string, got " + v.dump());
  return v.get<std::string>();
}

const std::set<std::string> kCommonKeys{"algo",       "shots",     "inner_steps", "meta_batch",
                                        "train_tasks", "val_tasks", "test_tasks",  "val_every",
                                        "runs",        "seed",      "outer_lr"};
const std::set<std::string> kMamlKeys{"inner_lr"};
const std::set<std::string> kLstmKeys{"lstm_input"};
const std::set<std::string> kTurtleKeys{"meta_layers", "meta_width",     "loss_input", "time_input",
                                        "normalize_time", "history", "beta",       "alpha"};

void apply(ExperimentConfig& c, const std::string& key, const json& v) {
  const bool applies = kCommonKeys.count(key) || (kMamlKeys.count(key) && is_maml(c.algo)) ||
                       (kLstmKeys.count(key) && is_lstm(c.algo)) ||
                       (kTurtleKeys.count(key) && is_turtle(c.algo));
  if (!applies) {
    if (kMamlKeys.count(key) || kLstmKeys.count(key) || kTurtleKeys.count(key)) {
      throw ConfigError(key, "'" + key + "' does not apply to algo '" + c.algo + "'");
    }
    throw ConfigError(key, "unknown config key '" + key + "'");
  }
  if (key == "algo" || key == "inner_steps") return;  // consumed by defaults()
  if (key == "shots") c.shots = get_count(key, v);
  else if (key == "meta_batch") c.meta_batch = get_count(key, v);
  else if (key == "train_tasks") c.train_tasks = get_count(key, v);
  else if (key == "val_tasks") c.val_tasks = get_count(key, v);
  else if (key == "test_tasks") c.test_tasks = get_count(key, v);
  else if (key == "val_every") c.val_every = get_count(key, v);
  else if (key == "runs") c.runs = get_count(key, v);
  else if (key == "seed") {
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0)) {
      throw ConfigError(key, "'seed' must be a non-negative integer, got " + v.dump());
    }
    c.seed = v.get<std::uint64_t>();
  } else if (key == "outer_lr") c.outer_lr = get_number(key, v);
  else if (key == "inner_lr") c.inner_lr = get_number(key, v);
  else if (key == "lstm_input") {
    const auto s = get_string(key, v);
    if (s == "raw") c.lstm_input = LstmInputMode::raw;
    else if (s == "log") c.lstm_input = LstmInputMode::log_preprocessed;
    else throw ConfigError(key, "'lstm_input' must be raw or log, got '" + s + "'");
  } else if (key == "meta_layers") c.meta_layers = get_count(key, v);
  else if (key == "meta_width") c.meta_width = get_count(key, v);
  else if (key == "loss_input") c.loss_input = get_bool(key, v);
  else if (key == "time_input") c.time_input = get_bool(key, v);
  else if (key == "normalize_time") c.normalize_time = get_bool(key, v);
  else if (key == "history") {
    try {
      c.history = parse_history(get_string(key, v));
    } catch (const ConfigError&) {
      throw;
    } catch (const std::invalid_argument& e) {
      throw ConfigError(key, e.what());
    }
  } else if (key == "beta") c.beta = get_number(key, v);
  else if (key == "alpha") {
    const auto s = get_string(key, v);
    if (s == "fixed") c.alpha = AlphaMode::fixed_ones;
    else if (s == "trainable") c.alpha = AlphaMode::trainable;
    else throw ConfigError(key, "'alpha' must be fixed or trainable, got '" + s + "'");
  }
}

std::string yes_no(bool b) { return b ? "yes" : "no"; }

std::string format_g(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", x);
  return buf;
}

json summary_json(const Summary& s) {
  return {{"mean", s.mean}, {"ci95", s.ci95}, {"median", s.median}, {"n", s.n}};
}

json checkpoint_json(const ExperimentConfig& cfg, const ParamValues& meta, const AdamState& adam,
                     std::size_t tasks_seen) {
  json components = json::object();
  for (const auto* prefix : {"theta/", "gates/", "phi/", "alpha/"}) {
    auto part = select(meta, prefix);
    if (!part.empty()) {
      std::string name(prefix);
      name.pop_back();
      components[name] = params_to_json(part);
    }
  }
  return {{"algo", cfg.algo},
          {"config", cfg.to_json()},
          {"meta_params", components},
          {"adam_state", adam_to_json(adam)},
          {"tasks_seen", tasks_seen}};
}

}  // namespace

const std::vector<std::string>& algo_ids() {
  static const std::vector<std::string> ids{"maml",          "fomaml", "lstm",
                                            "lstm-enhanced", "turtle", "fo-turtle"};
  return ids;
}

ExperimentConfig ExperimentConfig::defaults(const std::string& algo,
                                            std::optional<std::size_t> inner_steps) {
  const auto& ids = algo_ids();
  if (std::find(ids.begin(), ids.end(), algo) == ids.end()) {
    throw ConfigError("algo", "unknown algo '" + algo +
                                  "' (expected maml, fomaml, lstm, lstm-enhanced, turtle or fo-turtle)");
  }
  ExperimentConfig c;
  c.algo = algo;
  c.inner_steps = inner_steps.value_or(algo == "lstm-enhanced" ? 8 : 5);
  if (algo == "lstm-enhanced") c.lstm_input = LstmInputMode::raw;
  if (is_turtle(algo)) {
    switch (c.inner_steps) {
      case 1: c.history = HistoryKind::gradients; break;
      case 5:
        c.time_input = true, c.history = HistoryKind::gradients, c.beta = 0.9, c.meta_batch = 2;
        break;
      case 10:
        c.time_input = true, c.history = HistoryKind::gradients, c.beta = 0.3, c.meta_batch = 4;
        break;
      default: break;
    }
  }
  return c;
}

ExperimentConfig ExperimentConfig::resolve(const json& j) {
  if (!j.is_object()) throw ConfigError("config", "config must be a JSON object");
  const std::string algo = j.contains("algo") ? get_string("algo", j["algo"]) : "maml";
  std::optional<std::size_t> steps;
  if (j.contains("inner_steps")) steps = get_count("inner_steps", j["inner_steps"]);
  auto c = defaults(algo, steps);
  for (const auto& [key, value] : j.items()) apply(c, key, value);
  c.validate();
  return c;
}

void ExperimentConfig::validate() const {
  auto positive = [](const char* key, std::size_t v) {
    if (v < 1) throw ConfigError(key, std::string("'") + key + "' must be >= 1");
  };
  defaults(algo);
  positive("shots", shots);
  positive("inner_steps", inner_steps);
  positive("meta_batch", meta_batch);
  positive("train_tasks", train_tasks);
  positive("val_tasks", val_tasks);
  positive("test_tasks", test_tasks);
  positive("val_every", val_every);
  positive("runs", runs);
  positive("meta_layers", meta_layers);
  positive("meta_width", meta_width);
  if (val_every > train_tasks) {
    throw ConfigError("val_every", "'val_every' (" + std::to_string(val_every) +
                                       ") exceeds 'train_tasks' (" + std::to_string(train_tasks) + ")");
  }
  if (!(outer_lr > 0.0) || !std::isfinite(outer_lr)) {
    throw ConfigError("outer_lr", "'outer_lr' must be a finite number > 0");
  }
  if (!(inner_lr >= 0.0) || !std::isfinite(inner_lr)) {
    throw ConfigError("inner_lr", "'inner_lr' must be a finite number >= 0");
  }
  if (!(beta >= 0.0 && beta <= 1.0)) throw ConfigError("beta", "'beta' must lie in [0, 1]");
  if (algo == "lstm-enhanced" && lstm_input == LstmInputMode::log_preprocessed) {
    throw ConfigError("lstm_input",
                      "'lstm_input' log is only available with first-order updates (algo lstm)");
  }
}

json ExperimentConfig::to_json() const {
  json j{{"algo", algo},
         {"shots", shots},
         {"inner_steps", inner_steps},
         {"meta_batch", meta_batch},
         {"train_tasks", train_tasks},
         {"val_tasks", val_tasks},
         {"test_tasks", test_tasks},
         {"val_every", val_every},
         {"runs", runs},
         {"seed", seed},
         {"outer_lr", outer_lr}};
  if (is_maml(algo)) j["inner_lr"] = inner_lr;
  if (is_lstm(algo)) j["lstm_input"] = lstm_input == LstmInputMode::raw ? "raw" : "log";
  if (is_turtle(algo)) {
    j["meta_layers"] = meta_layers;
    j["meta_width"] = meta_width;
    j["loss_input"] = yes_no(loss_input);
    j["time_input"] = yes_no(time_input);
    j["normalize_time"] = yes_no(normalize_time);
    j["history"] = history_name(history);
    j["beta"] = beta;
    j["alpha"] = alpha == AlphaMode::trainable ? "trainable" : "fixed";
  }
  return j;
}

std::unique_ptr<Learner> make_learner(const ExperimentConfig& c) {
  c.validate();
  const auto base = MlpSpec::sine_base_learner();
  if (is_maml(c.algo)) {
    return std::make_unique<MamlLearner>(base, MamlConfig{c.inner_steps, c.inner_lr, c.algo == "maml"});
  }
  if (is_lstm(c.algo)) {
    LstmMetaConfig l;
    l.steps = c.inner_steps;
    l.second_order = c.algo == "lstm-enhanced";
    l.input_mode = c.lstm_input;
    return std::make_unique<LstmLearner>(base, l);
  }
  TurtleConfig t;
  t.steps = c.inner_steps;
  t.hidden_layers = c.meta_layers;
  t.hidden_width = c.meta_width;
  t.use_loss_input = c.loss_input;
  t.use_time_input = c.time_input;
  t.normalize_time = c.normalize_time;
  t.history = c.history;
  t.beta = c.beta;
  t.alpha_mode = c.alpha;
  t.second_order = c.algo == "turtle";
  return std::make_unique<TurtleLearner>(base, t);
}

TaskStreams make_streams(const ExperimentConfig& c) {
  return make_streams(c.shots, c.train_tasks, c.val_tasks, c.test_tasks, c.seed);
}

std::uint64_t init_seed(std::uint64_t master, std::size_t run) {
  return derive_seed(master, "init", run);
}

double evaluate_stream(const Learner& evaluation_learner, const ParamValues& meta,
                       const TaskStream& stream, const MlpSpec& base) {
  double total = 0.0;
  for (std::size_t i = 0; i < stream.size(); ++i) {
    const SineObjective objective(base, stream.at(i));
    total += evaluate_query_loss(evaluation_learner, meta, objective);
  }
  return total / static_cast<double>(stream.size());
}

void write_json(const std::filesystem::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

void write_metrics_csv(const RunRecord& r, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  char buf[64];
  out << "tasks_seen,split,mse\n";
  for (const auto& p : r.curve) {
    std::snprintf(buf, sizeof buf, "%zu,val,%.17g\n", p.tasks_seen, p.mse);
    out << buf;
  }
  if (!r.failed) {
    std::snprintf(buf, sizeof buf, "%zu,test,%.17g\n", r.best.tasks_seen, r.test_mse);
    out << buf;
  }
}

RunRecord train_run(const ExperimentConfig& cfg, std::size_t run, const TaskStreams& streams,
                    const RunHooks& hooks) {
  const auto start = std::chrono::steady_clock::now();
  const auto base = MlpSpec::sine_base_learner();
  RunRecord rec;
  rec.run = run;
  rec.init_seed = init_seed(cfg.seed, run);

  const auto learner = make_learner(cfg);
  const auto evaluator = learner->evaluation_copy();
  ParamValues meta = learner->init(rec.init_seed);
  ParamValues best = meta;
  AdamState adam;
  adam.lr = cfg.outer_lr;
  std::size_t tasks_seen = 0;
  const char* stage = "validation";

  auto validate = [&] {
    const CurvePoint point{tasks_seen, evaluate_stream(*evaluator, meta, streams.val, base)};
    rec.curve.push_back(point);
    if (rec.curve.size() == 1 || point.mse < rec.best.mse) {
      rec.best = point;
      best = meta;
      if (hooks.run_dir) {
        write_json(*hooks.run_dir / "checkpoint_best.json", checkpoint_json(cfg, best, adam, tasks_seen));
      }
    }
    if (hooks.on_validation) hooks.on_validation(run, point);
  };

  try {
    validate();
    std::size_t next_validation = cfg.val_every;
    std::vector<SineObjective> objectives;
    std::vector<const Objective*> batch;
    while (tasks_seen < cfg.train_tasks) {
      const std::size_t j = std::min(cfg.meta_batch, cfg.train_tasks - tasks_seen);
      objectives.clear();
      batch.clear();
      for (std::size_t i = 0; i < j; ++i) objectives.emplace_back(base, streams.train.at(tasks_seen + i));
      for (const auto& o : objectives) batch.push_back(&o);
      stage = "training";
      outer_step(adam, meta, batch, *learner);
      tasks_seen += j;
      if (tasks_seen >= next_validation) {
        stage = "validation";
        validate();
        while (next_validation <= tasks_seen) next_validation += cfg.val_every;
      }
    }
    stage = "test";
    rec.test_mse = evaluate_stream(*evaluator, best, streams.test, base);
    if (hooks.run_dir) {
      write_json(*hooks.run_dir / "checkpoint_final.json", checkpoint_json(cfg, meta, adam, tasks_seen));
    }
  } catch (const DivergenceError& e) {
    rec.failed = true;
    rec.failure = std::string(stage) + " after " + std::to_string(tasks_seen) + " tasks: " + e.what();
  }
  if (hooks.run_dir) write_metrics_csv(rec, *hooks.run_dir / "metrics.csv");
  rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return rec;
}

Summary summarize(const std::vector<double>& values) {
  Summary s;
  s.values = values;
  s.n = values.size();
  if (s.n == 0) return s;
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(s.n);
  if (s.n > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    const double sd = std::sqrt(ss / static_cast<double>(s.n - 1));
    s.ci95 = 1.96 * sd / std::sqrt(static_cast<double>(s.n));
  }
  auto sorted = values;
  std::sort(sorted.begin(), sorted.end());
  s.median = s.n % 2 ? sorted[s.n / 2] : 0.5 * (sorted[s.n / 2 - 1] + sorted[s.n / 2]);
  return s;
}

Aggregate aggregate(const std::vector<RunRecord>& records) {
  Aggregate a;
  std::vector<double> val, test;
  for (const auto& r : records) {
    if (r.failed) {
      a.failed_runs.push_back(r.run);
    } else {
      val.push_back(r.best.mse);
      test.push_back(r.test_mse);
    }
  }
  if (val.empty()) throw std::runtime_error("aggregate: every run failed");
  a.best_val = summarize(val);
  a.test = summarize(test);
  return a;
}

bool ExperimentResult::any_failed() const {
  return std::any_of(runs.begin(), runs.end(), [](const RunRecord& r) { return r.failed; });
}

ExperimentResult run_experiment(const ExperimentConfig& cfg, const ExperimentOptions& options) {
  cfg.validate();
  const auto streams = make_streams(cfg);
  ExperimentResult result;
  result.runs.resize(cfg.runs);
  if (options.out) std::filesystem::create_directories(*options.out);

  std::atomic<std::size_t> next{0};
  std::mutex callback_mutex;
  auto worker = [&] {
    for (std::size_t run; (run = next++) < cfg.runs;) {
      RunHooks hooks;
      if (options.on_validation) {
        hooks.on_validation = [&](std::size_t r, const CurvePoint& p) {
          std::lock_guard lock(callback_mutex);
          options.on_validation(r, p);
        };
      }
      if (options.out) {
        hooks.run_dir = *options.out / ("run_" + std::to_string(run));
        std::filesystem::create_directories(*hooks.run_dir);
      }
      result.runs[run] = train_run(cfg, run, streams, hooks);
    }
  };
  const std::size_t jobs = std::clamp<std::size_t>(options.jobs, 1, cfg.runs);
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> threads;
    for (std::size_t i = 0; i < jobs; ++i) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
  }

  if (std::any_of(result.runs.begin(), result.runs.end(), [](const RunRecord& r) { return !r.failed; })) {
    result.aggregate = aggregate(result.runs);
  }
  if (options.out) {
    write_json(*options.out / "results.json", results_json(cfg, result));
    json timing{{"per_run_seconds", json::array()}};
    double total = 0.0;
    for (const auto& r : result.runs) {
      timing["per_run_seconds"].push_back(r.wall_seconds);
      total += r.wall_seconds;
    }
    timing["total_run_seconds"] = total;
    write_json(*options.out / "timing.json", timing);
  }
  return result;
}

json results_json(const ExperimentConfig& cfg, const ExperimentResult& result) {
  json per_run = json::array();
  json failed = json::array();
  for (const auto& r : result.runs) {
    json entry{{"run", r.run}, {"init_seed", r.init_seed}, {"status", r.failed ? "failed" : "ok"}};
    json curve = json::array();
    for (const auto& p : r.curve) curve.push_back({{"tasks_seen", p.tasks_seen}, {"val_mse", p.mse}});
    entry["curve"] = curve;
    if (r.failed) {
      entry["error"] = r.failure;
      failed.push_back({{"run", r.run}, {"error", r.failure}});
    } else {
      entry["best_val"] = {{"tasks_seen", r.best.tasks_seen}, {"mse", r.best.mse}};
      entry["test_mse"] = r.test_mse;
    }
    per_run.push_back(entry);
  }
  json agg = nullptr;
  if (result.aggregate) {
    agg = {{"best_val", summary_json(result.aggregate->best_val)},
           {"test", summary_json(result.aggregate->test)}};
  }
  return {{"config", cfg.to_json()}, {"per_run", per_run}, {"aggregate", agg}, {"failed_runs", failed}};
}

std::size_t GridSpec::size() const {
  return time_input.size() * history.size() * beta.size() * meta_batch.size();
}

std::vector<GridEntry> grid_search(const ExperimentConfig& base, const GridSpec& grid,
                                   const ExperimentOptions& options) {
  if (grid.size() == 0) throw ConfigError("grid", "grid is empty");
  if (!is_turtle(base.algo)) throw ConfigError("algo", "grid search tunes turtle or fo-turtle");
  std::vector<GridEntry> entries;
  for (bool time : grid.time_input) {
    for (auto history : grid.history) {
      for (double beta : grid.beta) {
        for (std::size_t j : grid.meta_batch) {
          GridEntry e;
          e.config = base;
          e.config.time_input = time;
          e.config.history = history;
          e.config.beta = beta;
          e.config.meta_batch = j;
          e.setting = "time=" + yes_no(time) + ",history=" + std::string(history_name(history)) +
                      ",beta=" + format_g(beta) + ",J=" + std::to_string(j);
          e.config.validate();
          entries.push_back(std::move(e));
        }
      }
    }
  }
  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto opts = options;
    if (options.out) opts.out = *options.out / ("setting_" + std::to_string(i));
    const auto r = run_experiment(entries[i].config, opts);
    entries[i].runs = r.runs.size();
    entries[i].failed = static_cast<std::size_t>(
        std::count_if(r.runs.begin(), r.runs.end(), [](const RunRecord& x) { return x.failed; }));
    entries[i].aggregate = r.aggregate;
  }
  std::stable_sort(entries.begin(), entries.end(), [](const GridEntry& a, const GridEntry& b) {
    if (a.aggregate.has_value() != b.aggregate.has_value()) return a.aggregate.has_value();
    if (a.aggregate && a.aggregate->best_val.mean != b.aggregate->best_val.mean) {
      return a.aggregate->best_val.mean < b.aggregate->best_val.mean;
    }
    if (a.config.meta_batch != b.config.meta_batch) return a.config.meta_batch < b.config.meta_batch;
    return a.setting < b.setting;
  });
  if (options.out) write_json(*options.out / "grid.json", grid_json(entries));
  return entries;
}

json grid_json(const std::vector<GridEntry>& ranked) {
  json arr = json::array();
  for (const auto& e : ranked) {
    json row{{"setting", e.setting}};
    if (e.aggregate) {
      row["mean_best_val_mse"] = e.aggregate->best_val.mean;
      row["ci95"] = e.aggregate->best_val.ci95;
    } else {
      row["mean_best_val_mse"] = nullptr;
      row["ci95"] = nullptr;
    }
    row["runs"] = e.runs;
    row["failed_runs"] = e.failed;
    arr.push_back(row);
  }
  return arr;
}

}  // namespace metaturtle
