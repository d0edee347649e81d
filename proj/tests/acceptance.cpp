// Acceptance suite: prints one PASS/FAIL line per criterion, exits 1 if any
// selected criterion fails. The training criteria take a while; --only picks
// a subset, --jobs runs that many training runs at once.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <thread>

#include "CLI11.hpp"
#include "metaturtle/harness.hpp"
#include "metaturtle/verify.hpp"

using namespace metaturtle;
namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

struct Options {
  fs::path out = "acceptance_out";
  std::size_t jobs = 1;
  std::uint64_t seed = 1;
  std::set<int> only;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string fmt(const char* pattern, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, pattern, args...);
  return buf;
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

// Training experiments, each run once and shared between criteria.
class Experiments {
 public:
  explicit Experiments(const Options& o) : opt_(o) {}

  struct Entry {
    Aggregate agg;
    double seconds = 0.0;
    std::size_t failed = 0;
  };

  const Entry& get(const std::string& name, const ExperimentConfig& cfg) {
    if (auto it = done_.find(name); it != done_.end()) return it->second;
    std::cerr << "[acceptance] " << name << ": " << cfg.runs << " runs x " << cfg.train_tasks
              << " tasks" << std::endl;
    const auto t0 = std::chrono::steady_clock::now();
    ExperimentOptions eo;
    eo.jobs = opt_.jobs;
    eo.out = opt_.out / name;
    const auto r = run_experiment(cfg, eo);
    Entry e;
    e.seconds = seconds_since(t0);
    for (const auto& run : r.runs) {
      if (run.failed) {
        ++e.failed;
        std::cerr << "[acceptance] " << name << " run " << run.run << " failed: " << run.failure << '\n';
      }
    }
    if (!r.aggregate) throw std::runtime_error(name + ": every run failed");
    e.agg = *r.aggregate;
    std::cerr << fmt("[acceptance] %s: best val %.4f +- %.4f (%.0f s)\n", name.c_str(),
                     e.agg.best_val.mean, e.agg.best_val.ci95, e.seconds);
    return done_.emplace(name, std::move(e)).first->second;
  }

  ExperimentConfig reduced(const std::string& algo, std::optional<std::size_t> steps = {}) const {
    auto cfg = ExperimentConfig::defaults(algo, steps);
    cfg.train_tasks = 20000;
    cfg.runs = 5;
    cfg.shots = 5;
    cfg.seed = opt_.seed;
    return cfg;
  }

 private:
  const Options& opt_;
  std::map<std::string, Entry> done_;
};

std::string mean_ci(const Summary& s) { return fmt("%.4f+-%.4f", s.mean, s.ci95); }

Outcome check_result(const verify::CheckResult& r, double seconds, double limit) {
  return {r.passed && seconds < limit,
          fmt("error %.3g (bound %.0e), %.1f s (limit %.0f s)", r.observed, r.tolerance, seconds, limit)};
}

Outcome engine_fidelity(const Options& o) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto first = verify::fd_suite(1, 100, o.seed);
  const auto second = verify::fd_suite(2, 100, o.seed);
  const double s = seconds_since(t0);
  return {first.passed && second.passed && s < 60.0,
          fmt("100 compositions: first order %.3g (bound 1e-5), second order %.3g (bound 1e-4), %.1f s",
              first.observed, second.observed, s)};
}

Outcome theorem(const Options& o) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto r = verify::theorem1(0.01, 20, 10, o.seed);
  return check_result(r, seconds_since(t0), 60.0);
}

Outcome pass_through(const Options& o) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto r = verify::pass_through(o.seed);
  return check_result(r, seconds_since(t0), 10.0);
}

ExperimentConfig plain_turtle(const Experiments& ex, const std::string& algo) {
  auto cfg = ex.reduced(algo, 5);
  cfg.time_input = false;
  cfg.loss_input = false;
  cfg.history = HistoryKind::none;
  cfg.beta = 0.0;
  cfg.meta_batch = 1;
  cfg.meta_layers = 5;
  cfg.alpha = AlphaMode::fixed_ones;
  return cfg;
}

Outcome order_effect(Experiments& ex) {
  const auto& so = ex.get("turtle_plain", plain_turtle(ex, "turtle"));
  const auto& fo = ex.get("fo-turtle_plain", plain_turtle(ex, "fo-turtle"));
  const double gap = fo.agg.best_val.mean - so.agg.best_val.mean;
  const double margin = so.agg.best_val.ci95 + fo.agg.best_val.ci95;
  const double seconds = so.seconds + fo.seconds;
  return {gap > 0.0 && gap > margin && seconds <= 3600.0,
          fmt("second order %s, first order %s, gap %.4f vs CI sum %.4f, %.0f s",
              mean_ci(so.agg.best_val).c_str(), mean_ci(fo.agg.best_val).c_str(), gap, margin, seconds)};
}

Outcome maml_robustness(Experiments& ex) {
  const auto& so = ex.get("maml", ex.reduced("maml"));
  const auto& fo = ex.get("fomaml", ex.reduced("fomaml"));
  const double rel = std::abs(fo.agg.best_val.mean - so.agg.best_val.mean) / so.agg.best_val.mean;
  return {rel <= 0.25, fmt("maml %s, fomaml %s, relative difference %.1f%% (bound 25%%)",
                           mean_ci(so.agg.best_val).c_str(), mean_ci(fo.agg.best_val).c_str(), 100 * rel)};
}

Outcome tuned_turtle_ordering(Experiments& ex) {
  const auto& turtle = ex.get("turtle_tuned", ex.reduced("turtle", 5));
  const auto& maml = ex.get("maml", ex.reduced("maml"));
  const auto& lstm = ex.get("lstm", ex.reduced("lstm"));
  const double t = turtle.agg.best_val.mean;
  return {t < maml.agg.best_val.mean && t < lstm.agg.best_val.mean,
          fmt("turtle %s, maml %s, lstm %s", mean_ci(turtle.agg.best_val).c_str(),
              mean_ci(maml.agg.best_val).c_str(), mean_ci(lstm.agg.best_val).c_str())};
}

Outcome enhanced_lstm(Experiments& ex) {
  const auto& base = ex.get("lstm", ex.reduced("lstm"));
  const auto& enh = ex.get("lstm-enhanced", ex.reduced("lstm-enhanced"));
  const double limit = base.agg.best_val.mean + base.agg.best_val.ci95;
  return {enh.agg.best_val.mean <= limit,
          fmt("enhanced %s vs baseline %s, allowed up to %.4f", mean_ci(enh.agg.best_val).c_str(),
              mean_ci(base.agg.best_val).c_str(), limit)};
}

// Sample sd based half-width recomputed from the per-run values in a results file.
bool ci_matches(const json& results) {
  std::vector<double> v;
  for (const auto& r : results["per_run"]) {
    if (r["status"] == "ok") v.push_back(r["test_mse"].get<double>());
  }
  const auto& test = results["aggregate"]["test"];
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double ci = 0.0;
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    ci = 1.96 * std::sqrt(ss / static_cast<double>(v.size() - 1)) / std::sqrt(static_cast<double>(v.size()));
  }
  return test["n"] == v.size() && std::abs(test["mean"].get<double>() - mean) <= 1e-12 * std::abs(mean) &&
         std::abs(test["ci95"].get<double>() - ci) <= 1e-12 * std::max(ci, 1e-300);
}

Outcome protocol(const Options& o) {
  auto cfg = ExperimentConfig::defaults("maml");
  cfg.runs = 1;
  cfg.seed = o.seed;
  std::vector<std::string> problems;

  const auto streams = make_streams(cfg);
  if (streams.train.size() != 70000 || streams.val.size() != 1000 || streams.test.size() != 2000) {
    problems.push_back("stream sizes");
  }
  std::cerr << "[acceptance] default configuration, 1 run" << std::endl;
  ExperimentOptions eo;
  eo.out = o.out / "default";
  run_experiment(cfg, eo);
  const auto j = json::parse(slurp(o.out / "default" / "results.json"));
  const auto& c = j["config"];
  if (c["train_tasks"] != 70000 || c["val_tasks"] != 1000 || c["test_tasks"] != 2000 ||
      c["val_every"] != 2500 || c["shots"] != 5) {
    problems.push_back("config block");
  }
  const auto& curve = j["per_run"][0]["curve"];
  bool schedule = curve.size() == 70000 / 2500 + 1;
  for (std::size_t i = 0; schedule && i < curve.size(); ++i) schedule = curve[i]["tasks_seen"] == 2500 * i;
  if (!schedule) problems.push_back("validation schedule");
  const auto& test = j["aggregate"]["test"];
  if (!test.contains("mean") || !test.contains("ci95") || test["n"] != 1 || test["ci95"] != 0.0 ||
      !j["aggregate"]["best_val"].contains("ci95") || !ci_matches(j)) {
    problems.push_back("single-run aggregate");
  }

  // The half-width formula on several runs.
  auto multi = cfg;
  multi.algo = "fomaml";
  multi.train_tasks = 200;
  multi.val_every = 100;
  multi.val_tasks = 50;
  multi.test_tasks = 50;
  multi.runs = 4;
  eo.out = o.out / "default_ci";
  run_experiment(multi, eo);
  const auto jm = json::parse(slurp(o.out / "default_ci" / "results.json"));
  if (!ci_matches(jm) || jm["aggregate"]["test"]["ci95"].get<double>() <= 0.0) {
    problems.push_back("mean +- 1.96 sd / sqrt(R)");
  }

  std::string detail = "70000/1000/2000 streams, validation every 2500 (29 points), mean +- 1.96 sd/sqrt(R)";
  if (!problems.empty()) {
    detail = "mismatch:";
    for (const auto& p : problems) detail += " " + p + ";";
  }
  return {problems.empty(), detail};
}

Outcome determinism(const Options& o) {
  std::vector<std::string> same;
  bool all = true;
  for (const char* algo : {"maml", "lstm-enhanced", "turtle"}) {
    auto cfg = ExperimentConfig::defaults(algo);
    cfg.train_tasks = 300;
    cfg.val_every = 100;
    cfg.val_tasks = 20;
    cfg.test_tasks = 20;
    cfg.runs = 2;
    cfg.seed = o.seed;
    const auto a = o.out / "determinism" / (std::string(algo) + "_a");
    const auto b = o.out / "determinism" / (std::string(algo) + "_b");
    ExperimentOptions eo;
    eo.out = a;
    run_experiment(cfg, eo);
    eo.out = b;
    eo.jobs = 2;
    run_experiment(cfg, eo);
    const bool eq = slurp(a / "results.json") == slurp(b / "results.json") &&
                    slurp(a / "run_1" / "metrics.csv") == slurp(b / "run_1" / "metrics.csv");
    all = all && eq;
    same.push_back(std::string(algo) + (eq ? " identical" : " DIFFERENT"));
  }
  std::string detail = "results.json from two invocations:";
  for (const auto& s : same) detail += " " + s + ";";
  detail.pop_back();
  return {all, detail};
}

}  // namespace

int main(int argc, char** argv) {
  Options opt;
  opt.jobs = std::max(1u, std::thread::hardware_concurrency());
  std::vector<int> only;
  std::string out = opt.out.string();
  CLI::App app{"acceptance criteria"};
  app.add_option("--only", only, "criteria to run (default all)")->delimiter(',')->check(CLI::Range(1, 9));
  app.add_option("--out", out, "directory for experiment outputs");
  app.add_option("--jobs", opt.jobs, "concurrent training runs")->check(CLI::PositiveNumber);
  app.add_option("--seed", opt.seed, "master seed");
  CLI11_PARSE(app, argc, argv);
  opt.out = out;
  opt.only.insert(only.begin(), only.end());
  fs::create_directories(opt.out);

  Experiments ex(opt);
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"engine fidelity (finite differences)", [&] { return engine_fidelity(opt); }},
      {"lstm construction reproduces gradient descent", [&] { return theorem(opt); }},
      {"turtle pass-through equals gradient descent", [&] { return pass_through(opt); }},
      {"second- vs first-order turtle", [&] { return order_effect(ex); }},
      {"maml vs first-order maml", [&] { return maml_robustness(ex); }},
      {"tuned turtle beats maml and lstm", [&] { return tuned_turtle_ordering(ex); }},
      {"enhanced lstm no worse than baseline", [&] { return enhanced_lstm(ex); }},
      {"default protocol", [&] { return protocol(opt); }},
      {"determinism", [&] { return determinism(opt); }},
  };

  std::ofstream summary(opt.out / "summary.txt");
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!opt.only.empty() && !opt.only.count(id)) continue;
    Outcome r;
    try {
      r = criteria[i].second();
    } catch (const std::exception& e) {
      r = {false, std::string("error: ") + e.what()};
    }
    if (!r.pass) ++failures;
    const std::string line = "criterion " + std::to_string(id) + " " + (r.pass ? "PASS" : "FAIL") +
                             ": " + criteria[i].first + ": " + r.detail;
    std::cout << line << std::endl;
    summary << line << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
