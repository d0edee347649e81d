#include "metaturtle/cli.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>

#include "CLI11.hpp"
#include "metaturtle/harness.hpp"
#include "metaturtle/plot.hpp"
#include "metaturtle/verify.hpp"

namespace metaturtle {
namespace {

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

// Raised for bad input; exits 1.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string flag_of(const std::string& key) {
  std::string f = "--" + key;
  for (auto& c : f) {
    if (c == '_') c = '-';
  }
  return f;
}

// Experiment flags shared by train and grid. Each flag writes its config key
// only when given, so config-file values survive unless overridden.
struct ExperimentFlags {
  std::string config_path;
  std::string out;
  std::size_t jobs = 1;
  bool quiet = false;
  std::map<std::string, std::string> strings;
  std::map<std::string, std::size_t> counts;
  std::map<std::string, double> numbers;
  std::uint64_t seed = 0;
  std::vector<std::pair<std::string, CLI::Option*>> options;

  void add(CLI::App& app, bool grid) {
    app.add_option("--config", config_path, "JSON config file; flags override its values")
        ->check(CLI::ExistingFile);
    app.add_option("--out", out, "output directory");
    app.add_option("--jobs", jobs, "runs executed concurrently")->check(CLI::PositiveNumber);
    app.add_flag("--quiet", quiet, "no progress output");
    auto str = [&](const char* key, const std::string& help) {
      options.emplace_back(key, app.add_option(flag_of(key), strings[key], help));
    };
    auto count = [&](const char* key, const std::string& help) {
      options.emplace_back(key, app.add_option(flag_of(key), counts[key], help));
    };
    auto number = [&](const char* key, const std::string& help) {
      options.emplace_back(key, app.add_option(flag_of(key), numbers[key], help));
    };
    str("algo", "maml | fomaml | lstm | lstm-enhanced | turtle | fo-turtle");
    count("shots", "support examples per task (k)");
    count("inner_steps", "inner updates per task (T)");
    if (!grid) count("meta_batch", "tasks per outer update (J)");
    count("train_tasks", "meta-training task budget");
    count("val_every", "tasks between validations");
    count("val_tasks", "validation tasks");
    count("test_tasks", "test tasks");
    count("runs", "independent runs");
    options.emplace_back("seed", app.add_option("--seed", seed, "master seed (fallback: METATURTLE_SEED)"));
    number("outer_lr", "Adam learning rate");
    number("inner_lr", "MAML inner learning rate");
    str("lstm_input", "raw | log (meta-learner LSTM gate inputs)");
    count("meta_layers", "TURTLE meta-network hidden layers");
    count("meta_width", "TURTLE meta-network hidden width");
    str("loss_input", "yes | no: feed the support loss to TURTLE");
    if (!grid) str("time_input", "yes | no: feed the step index to TURTLE");
    str("normalize_time", "yes | no: time input as t / T");
    if (!grid) str("history", "none | gradients | updates");
    if (!grid) number("beta", "history decay in [0, 1]");
    str("alpha", "fixed | trainable TURTLE learning-rate vector");
  }

  // Config file, then flags, then the environment seed fallback.
  json collect() const {
    json j = json::object();
    if (!config_path.empty()) {
      std::ifstream in(config_path);
      try {
        j = json::parse(in);
      } catch (const json::parse_error& e) {
        throw UsageError("--config: " + config_path + ": " + e.what());
      }
      if (!j.is_object()) throw UsageError("--config: " + config_path + ": expected a JSON object");
    }
    for (const auto& [key, opt] : options) {
      if (opt->count() == 0) continue;
      if (key == "seed") j[key] = seed;
      else if (strings.count(key)) j[key] = strings.at(key);
      else if (counts.count(key)) j[key] = counts.at(key);
      else j[key] = numbers.at(key);
    }
    if (!j.contains("seed")) {
      if (const char* env = std::getenv("METATURTLE_SEED"); env && *env) {
        std::uint64_t s = 0;
        std::istringstream in(env);
        if (!(in >> s) || !in.eof() || env[0] == '-') {
          throw UsageError("METATURTLE_SEED: '" + std::string(env) + "' is not a non-negative integer");
        }
        j["seed"] = s;
      }
    }
    return j;
  }

  // Keys only the command (not the experiment) understands.
  void take_command_keys(json& j, std::string& out_dir, std::size_t& jobs_out) const {
    if (j.contains("out")) {
      if (!j["out"].is_string()) throw UsageError("--out: config value must be a string");
      if (out_dir.empty()) out_dir = j["out"].get<std::string>();
      j.erase("out");
    }
    if (j.contains("jobs")) {
      if (!j["jobs"].is_number_unsigned() || j["jobs"].get<std::size_t>() == 0) {
        throw UsageError("--jobs: config value must be a positive integer");
      }
      if (jobs_out == 1) jobs_out = j["jobs"].get<std::size_t>();
      j.erase("jobs");
    }
  }
};

ExperimentConfig resolve_or_throw(const json& j) {
  try {
    return ExperimentConfig::resolve(j);
  } catch (const ConfigError& e) {
    throw UsageError(flag_of(e.key()) + ": " + e.what());
  }
}

std::string aggregate_line(const ExperimentConfig& cfg, const ExperimentResult& r) {
  char buf[256];
  if (!r.aggregate) {
    std::snprintf(buf, sizeof buf, "%s %zu %zu %zu all runs failed", cfg.algo.c_str(), cfg.shots,
                  cfg.inner_steps, cfg.meta_batch);
  } else {
    std::snprintf(buf, sizeof buf, "%s %zu %zu %zu %.6g±%.3g", cfg.algo.c_str(), cfg.shots,
                  cfg.inner_steps, cfg.meta_batch, r.aggregate->test.mean, r.aggregate->test.ci95);
  }
  return buf;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, ',')) out.push_back(item);
  return out;
}

std::function<void(std::size_t, const CurvePoint&)> progress(bool quiet, std::ostream& err) {
  if (quiet) return {};
  return [&err](std::size_t run, const CurvePoint& p) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "[run %zu] tasks %zu val_mse %.6g", run, p.tasks_seen, p.mse);
    err << buf << std::endl;
  };
}

int do_train(const ExperimentFlags& flags, std::size_t dump_tasks, std::ostream& out, std::ostream& err) {
  json j = flags.collect();
  std::string out_dir = flags.out;
  std::size_t jobs = flags.jobs;
  flags.take_command_keys(j, out_dir, jobs);
  const auto cfg = resolve_or_throw(j);
  if (out_dir.empty()) throw UsageError("--out: an output directory is required");

  ExperimentOptions options;
  options.jobs = jobs;
  options.out = out_dir;
  options.on_validation = progress(flags.quiet, err);
  if (dump_tasks > 0) {
    fs::create_directories(out_dir);
    const auto streams = make_streams(cfg);
    for (const auto* s : {&streams.train, &streams.val, &streams.test}) {
      std::ofstream f(fs::path(out_dir) / ("tasks_" + std::string(split_name(s->split())) + ".jsonl"));
      dump_tasks_jsonl(*s, std::min(dump_tasks, s->size()), f);
    }
  }
  const auto result = run_experiment(cfg, options);
  for (const auto& r : result.runs) {
    if (r.failed) err << "run " << r.run << " failed: " << r.failure << '\n';
  }
  out << aggregate_line(cfg, result) << std::endl;
  return result.any_failed() ? 2 : 0;
}

template <class T, class F>
std::vector<T> parse_grid(const std::string& flag, const std::string& text, F parse) {
  std::vector<T> out;
  for (const auto& item : split_list(text)) {
    try {
      out.push_back(parse(item));
    } catch (const std::exception&) {
      throw UsageError(flag + ": cannot parse '" + item + "'");
    }
  }
  if (out.empty()) throw UsageError(flag + ": empty grid");
  return out;
}

int do_grid(const ExperimentFlags& flags, const std::map<std::string, std::string>& grids,
            std::ostream& out, std::ostream& err) {
  json j = flags.collect();
  std::string out_dir = flags.out;
  std::size_t jobs = flags.jobs;
  flags.take_command_keys(j, out_dir, jobs);
  if (!j.contains("algo")) j["algo"] = "turtle";
  if (!j.contains("train_tasks")) j["train_tasks"] = 20000;
  if (!j.contains("runs")) j["runs"] = 5;
  const auto base = resolve_or_throw(j);
  if (base.algo != "turtle" && base.algo != "fo-turtle") {
    throw UsageError("--algo: grid search tunes turtle or fo-turtle");
  }
  if (out_dir.empty()) throw UsageError("--out: an output directory is required");

  GridSpec grid;
  if (auto it = grids.find("time"); it != grids.end() && !it->second.empty()) {
    grid.time_input = parse_grid<bool>("--time-grid", it->second, [](const std::string& s) {
      if (s == "yes") return true;
      if (s == "no") return false;
      throw std::invalid_argument(s);
    });
  }
  if (auto it = grids.find("history"); it != grids.end() && !it->second.empty()) {
    grid.history = parse_grid<HistoryKind>("--history-grid", it->second, [](const std::string& s) {
      return parse_history(s);
    });
  }
  if (auto it = grids.find("beta"); it != grids.end() && !it->second.empty()) {
    grid.beta = parse_grid<double>("--beta-grid", it->second, [](const std::string& s) {
      std::size_t used = 0;
      const double v = std::stod(s, &used);
      if (used != s.size() || !(v >= 0.0 && v <= 1.0)) throw std::invalid_argument(s);
      return v;
    });
  }
  if (auto it = grids.find("meta_batch"); it != grids.end() && !it->second.empty()) {
    grid.meta_batch = parse_grid<std::size_t>("--meta-batch-grid", it->second, [](const std::string& s) {
      std::size_t used = 0;
      const auto v = std::stoull(s, &used);
      if (used != s.size() || v == 0 || s[0] == '-') throw std::invalid_argument(s);
      return static_cast<std::size_t>(v);
    });
  }

  ExperimentOptions options;
  options.jobs = jobs;
  options.out = out_dir;
  options.on_validation = progress(flags.quiet, err);
  const auto ranked = grid_search(base, grid, options);
  std::size_t rank = 1;
  bool failures = false;
  for (const auto& e : ranked) {
    char buf[256];
    if (e.aggregate) {
      std::snprintf(buf, sizeof buf, "%2zu %s best_val %.6g±%.3g", rank, e.setting.c_str(),
                    e.aggregate->best_val.mean, e.aggregate->best_val.ci95);
    } else {
      std::snprintf(buf, sizeof buf, "%2zu %s all runs failed", rank, e.setting.c_str());
    }
    failures = failures || e.failed > 0;
    out << buf << '\n';
    ++rank;
  }
  out.flush();
  return failures ? 2 : 0;
}

int do_verify(double alpha, bool break_detach, std::uint64_t seed, std::ostream& out) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw UsageError("--theorem-alpha: must lie in (0, 1)");
  verify::SuiteOptions options;
  options.theorem_alpha = alpha;
  options.break_detach = break_detach;
  options.seed = seed;
  std::vector<std::string> failed;
  for (const auto& r : verify::run_suite(options)) {
    out << verify::format(r) << '\n';
    if (!r.passed) failed.push_back(r.name);
  }
  if (failed.empty()) {
    out << "all checks passed" << std::endl;
    return 0;
  }
  out << "failed checks:";
  for (const auto& f : failed) out << (&f == &failed.front() ? " " : ", ") << f;
  out << std::endl;
  return 2;
}

int do_plot(const std::vector<std::string>& inputs, const std::vector<std::string>& labels,
            const std::string& out_path, const std::string& title, std::ostream& out) {
  std::vector<std::string> files;
  for (const auto& in : inputs) {
    for (const auto& f : split_list(in)) {
      if (!f.empty()) files.push_back(f);
    }
  }
  std::vector<std::string> names;
  for (const auto& l : labels) {
    for (const auto& n : split_list(l)) names.push_back(n);
  }
  if (files.empty()) throw UsageError("--in: nothing to plot");
  if (!names.empty() && names.size() != files.size()) {
    throw UsageError("--labels: " + std::to_string(names.size()) + " labels for " +
                     std::to_string(files.size()) + " inputs");
  }
  std::vector<plot::Series> series;
  for (std::size_t i = 0; i < files.size(); ++i) {
    const std::string label = names.empty() ? fs::path(files[i]).filename().string() : names[i];
    try {
      series.push_back(plot::load_series(files[i], label));
    } catch (const plot::CsvError& e) {
      throw UsageError(std::string("--in: malformed CSV: ") + e.what());
    } catch (const std::runtime_error& e) {
      throw UsageError(std::string("--in: ") + e.what());
    }
  }
  std::string svg;
  try {
    svg = plot::render_svg(series, title);
  } catch (const std::invalid_argument& e) {
    throw UsageError(std::string("--in: ") + e.what());
  }
  std::ofstream f(out_path, std::ios::binary);
  if (!f) throw UsageError("--out: cannot write " + out_path);
  f << svg;
  out << "wrote " << out_path << std::endl;
  return 0;
}

}  // namespace

int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Meta-learning sine regression: MAML, meta-learner LSTM and TURTLE", "metaturtle"};
  app.require_subcommand(1);

  auto* train = app.add_subcommand("train", "train and evaluate one configuration over several runs");
  ExperimentFlags train_flags;
  train_flags.add(*train, false);
  std::size_t dump_tasks = 0;
  train->add_option("--dump-tasks", dump_tasks, "write the first N tasks of each stream as JSON lines");

  auto* grid = app.add_subcommand("grid", "grid search over TURTLE input, history, decay and meta-batch");
  ExperimentFlags grid_flags;
  grid_flags.add(*grid, true);
  std::map<std::string, std::string> grids;
  grid->add_option("--time-grid", grids["time"], "time input values (default yes,no)");
  grid->add_option("--history-grid", grids["history"], "history kinds (default gradients,updates)");
  grid->add_option("--beta-grid", grids["beta"], "decay values (default 0,0.1,...,0.95)");
  grid->add_option("--meta-batch-grid", grids["meta_batch"], "meta-batch sizes (default 1,2,...,64)");

  auto* ver = app.add_subcommand("verify", "run the correctness checks");
  double theorem_alpha = 0.01;
  bool break_detach = false;
  std::uint64_t verify_seed = 1;
  ver->add_option("--theorem-alpha", theorem_alpha, "step size for the LSTM construction check");
  ver->add_flag("--break-detach", break_detach, "fault injection: detach() lets gradients through");
  ver->add_option("--seed", verify_seed, "seed for random checks");

  auto* pl = app.add_subcommand("plot", "SVG chart of mean validation curves");
  std::vector<std::string> inputs, labels;
  std::string plot_out, title;
  pl->add_option("--in", inputs, "metrics.csv files or run directories (comma separated)")->required();
  pl->add_option("--labels", labels, "legend labels (comma separated)");
  pl->add_option("--out", plot_out, "output SVG")->required();
  pl->add_option("--title", title, "chart title");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    const CLI::App* shown = &app;
    for (const auto* sub : {train, grid, ver, pl}) {
      if (sub->parsed()) shown = sub;
    }
    out << shown->help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }

  try {
    if (*train) return do_train(train_flags, dump_tasks, out, err);
    if (*grid) return do_grid(grid_flags, grids, out, err);
    if (*ver) return do_verify(theorem_alpha, break_detach, verify_seed, out);
    return do_plot(inputs, labels, plot_out, title, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }
}

}  // namespace metaturtle
