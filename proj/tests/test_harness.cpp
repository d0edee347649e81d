// Training loop schedule, aggregation, config resolution and grid search.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "doctest.h"
#include "metaturtle/harness.hpp"

using namespace metaturtle;
using nlohmann::ordered_json;

namespace {

ExperimentConfig small(const std::string& algo = "fomaml") {
  auto cfg = ExperimentConfig::defaults(algo);
  cfg.train_tasks = 40;
  cfg.val_every = 20;
  cfg.val_tasks = 3;
  cfg.test_tasks = 3;
  cfg.runs = 2;
  cfg.seed = 11;
  return cfg;
}

std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() /
             ("metaturtle_" + name + "_" + std::to_string(std::random_device{}()));
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("validation schedule: budget 5000, every 2500 gives 3 points") {
  auto cfg = small("fomaml");
  cfg.train_tasks = 5000;
  cfg.val_every = 2500;
  cfg.val_tasks = 1;
  cfg.test_tasks = 1;
  cfg.meta_batch = 3;  // 2500 is not a multiple of 3; validation fires on crossing
  const auto rec = train_run(cfg, 0, make_streams(cfg));
  REQUIRE_FALSE(rec.failed);
  REQUIRE(rec.curve.size() == 3);
  CHECK(rec.curve[0].tasks_seen == 0);
  CHECK(rec.curve[1].tasks_seen == 2502);
  CHECK(rec.curve[2].tasks_seen == 5000);
}

TEST_CASE("point count is floor(budget / val_every) + 1") {
  for (std::size_t budget : {10, 25, 30}) {
    auto cfg = small("fomaml");
    cfg.train_tasks = budget;
    cfg.val_every = 10;
    cfg.val_tasks = 1;
    cfg.test_tasks = 1;
    const auto rec = train_run(cfg, 0, make_streams(cfg));
    CHECK(rec.curve.size() == budget / 10 + 1);
  }
}

TEST_CASE("best checkpoint is the first argmin of the curve") {
  const auto cfg = small("maml");
  const auto rec = train_run(cfg, 0, make_streams(cfg));
  REQUIRE_FALSE(rec.failed);
  std::size_t arg = 0;
  for (std::size_t i = 1; i < rec.curve.size(); ++i) {
    if (rec.curve[i].mse < rec.curve[arg].mse) arg = i;
  }
  CHECK(rec.best.tasks_seen == rec.curve[arg].tasks_seen);
  CHECK(rec.best.mse == rec.curve[arg].mse);
  CHECK(std::isfinite(rec.test_mse));
}

TEST_CASE("evaluation leaves meta-parameters untouched") {
  for (const char* algo : {"maml", "lstm-enhanced", "turtle"}) {
    auto cfg = small(algo);
    cfg.meta_layers = 1;
    cfg.meta_width = 4;
    const auto learner = make_learner(cfg);
    const auto meta = learner->init(5);
    const auto before = meta;
    const auto streams = make_streams(cfg);
    evaluate_stream(*learner->evaluation_copy(), meta, streams.val, MlpSpec::sine_base_learner());
    CHECK(meta == before);
  }
}

TEST_CASE("same config and run give identical records") {
  auto cfg = small("turtle");
  cfg.meta_layers = 1;
  cfg.meta_width = 4;
  const auto streams = make_streams(cfg);
  const auto a = train_run(cfg, 1, streams);
  const auto b = train_run(cfg, 1, streams);
  REQUIRE(a.curve.size() == b.curve.size());
  for (std::size_t i = 0; i < a.curve.size(); ++i) {
    CHECK(a.curve[i].tasks_seen == b.curve[i].tasks_seen);
    CHECK(a.curve[i].mse == b.curve[i].mse);
  }
  CHECK(a.test_mse == b.test_mse);
  CHECK(a.init_seed == b.init_seed);
  CHECK(a.init_seed != train_run(cfg, 0, streams).init_seed);
}

TEST_CASE("summaries") {
  const auto flat = summarize({1, 1, 1});
  CHECK(flat.mean == 1.0);
  CHECK(flat.ci95 == 0.0);
  const auto s = summarize({1, 2, 3});
  CHECK(s.mean == doctest::Approx(2.0));
  CHECK(s.ci95 == doctest::Approx(1.96 / std::sqrt(3.0)).epsilon(1e-12));
  CHECK(s.ci95 == doctest::Approx(1.1316).epsilon(1e-4));
  CHECK(s.median == 2.0);
  CHECK(summarize({4.0}).ci95 == 0.0);
  CHECK(summarize({4, 1, 3, 2}).median == 2.5);
}

TEST_CASE("aggregate excludes failed runs and rejects all-failed") {
  RunRecord ok{.run = 0, .best = {10, 2.0}, .test_mse = 3.0};
  RunRecord ok2{.run = 2, .best = {10, 4.0}, .test_mse = 5.0};
  RunRecord bad{.run = 1, .failed = true, .failure = "training after 3 tasks: x"};
  const auto agg = aggregate({ok, bad, ok2});
  CHECK(agg.best_val.n == 2);
  CHECK(agg.best_val.mean == 3.0);
  CHECK(agg.test.mean == 4.0);
  REQUIRE(agg.failed_runs.size() == 1);
  CHECK(agg.failed_runs[0] == 1);
  CHECK_THROWS_AS(aggregate({bad}), std::runtime_error);
}

TEST_CASE("divergent runs are recorded as failed, not thrown") {
  auto cfg = small("maml");
  cfg.inner_lr = 1e200;
  cfg.runs = 2;
  const auto r = run_experiment(cfg);
  REQUIRE(r.runs.size() == 2);
  CHECK(r.runs[0].failed);
  CHECK(r.runs[0].failure.rfind("validation after 0 tasks: ", 0) == 0);
  CHECK(r.any_failed());
  CHECK_FALSE(r.aggregate.has_value());
  const auto j = results_json(cfg, r);
  CHECK(j["aggregate"].is_null());
  CHECK(j["failed_runs"].size() == 2);
}

TEST_CASE("defaults per algorithm and steps") {
  const auto t5 = ExperimentConfig::defaults("turtle", 5);
  CHECK(t5.time_input);
  CHECK(t5.history == HistoryKind::gradients);
  CHECK(t5.beta == 0.9);
  CHECK(t5.meta_batch == 2);
  const auto t1 = ExperimentConfig::defaults("turtle", 1);
  CHECK_FALSE(t1.time_input);
  CHECK(t1.history == HistoryKind::gradients);
  CHECK(t1.beta == 0.0);
  CHECK(t1.meta_batch == 1);
  CHECK(ExperimentConfig::defaults("lstm-enhanced").inner_steps == 8);
  CHECK(ExperimentConfig::defaults("lstm-enhanced").lstm_input == LstmInputMode::raw);
  CHECK(ExperimentConfig::defaults("lstm").lstm_input == LstmInputMode::log_preprocessed);

  const auto d = ExperimentConfig::defaults("maml");
  CHECK(d.train_tasks == 70000);
  CHECK(d.val_tasks == 1000);
  CHECK(d.test_tasks == 2000);
  CHECK(d.val_every == 2500);
  CHECK(d.shots == 5);
}

TEST_CASE("resolve applies keys over the algorithm defaults") {
  const auto cfg = ExperimentConfig::resolve(ordered_json{{"beta", 0.5}, {"algo", "turtle"}, {"inner_steps", 5}});
  CHECK(cfg.beta == 0.5);
  CHECK(cfg.time_input);
  CHECK(cfg.meta_batch == 2);
  CHECK(ExperimentConfig::resolve(ordered_json{{"algo", "lstm-enhanced"}}).inner_steps == 8);

  auto key_of = [](const ordered_json& j) {
    try {
      ExperimentConfig::resolve(j);
    } catch (const ConfigError& e) {
      return e.key();
    }
    return std::string("<none>");
  };
  CHECK(key_of({{"algo", "maml"}, {"bogus", 1}}) == "bogus");
  CHECK(key_of({{"algo", "maml"}, {"beta", 0.5}}) == "beta");
  CHECK(key_of({{"algo", "nope"}}) == "algo");
  CHECK(key_of({{"algo", "maml"}, {"shots", "five"}}) == "shots");
  CHECK(key_of({{"algo", "maml"}, {"shots", 0}}) == "shots");
  CHECK(key_of({{"algo", "turtle"}, {"beta", 1.5}}) == "beta");
}

TEST_CASE("config json round-trips through resolve") {
  auto cfg = ExperimentConfig::defaults("turtle", 10);
  cfg.seed = 99;
  const auto again = ExperimentConfig::resolve(cfg.to_json());
  CHECK(again.to_json() == cfg.to_json());
}

TEST_CASE("experiment outputs") {
  const auto dir = temp_dir("experiment");
  auto cfg = small("fomaml");
  const auto r = run_experiment(cfg, {.jobs = 2, .out = dir});
  REQUIRE(r.aggregate.has_value());

  const auto j = ordered_json::parse(slurp(dir / "results.json"));
  CHECK(j["config"]["algo"] == "fomaml");
  CHECK(j["per_run"].size() == 2);
  CHECK(j["per_run"][0]["curve"].size() == 3);
  CHECK(j["aggregate"]["test"]["n"] == 2);
  CHECK(j["aggregate"]["best_val"].contains("ci95"));
  CHECK(j["failed_runs"].empty());
  CHECK(std::filesystem::exists(dir / "timing.json"));
  for (const char* run : {"run_0", "run_1"}) {
    CHECK(std::filesystem::exists(dir / run / "checkpoint_best.json"));
    CHECK(std::filesystem::exists(dir / run / "checkpoint_final.json"));
  }
  const auto csv = slurp(dir / "run_0" / "metrics.csv");
  CHECK(csv.rfind("tasks_seen,split,mse\n0,val,", 0) == 0);
  CHECK(csv.find(",test,") != std::string::npos);

  const auto ckpt = ordered_json::parse(slurp(dir / "run_0" / "checkpoint_final.json"));
  CHECK(ckpt["tasks_seen"] == 40);
  CHECK(ckpt["meta_params"].contains("theta"));

  // jobs do not change the results
  const auto dir1 = temp_dir("experiment1");
  run_experiment(cfg, {.jobs = 1, .out = dir1});
  CHECK(slurp(dir / "results.json") == slurp(dir1 / "results.json"));
  std::filesystem::remove_all(dir);
  std::filesystem::remove_all(dir1);
}

TEST_CASE("grid of size 1 returns that setting") {
  auto base = small("turtle");
  base.runs = 1;
  base.meta_layers = 1;
  base.meta_width = 4;
  GridSpec grid{{false}, {HistoryKind::updates}, {0.3}, {2}};
  CHECK(grid.size() == 1);
  const auto ranked = grid_search(base, grid);
  REQUIRE(ranked.size() == 1);
  CHECK(ranked[0].setting == "time=no,history=updates,beta=0.3,J=2");
  CHECK(ranked[0].config.meta_batch == 2);
  CHECK(ranked[0].aggregate.has_value());
  CHECK(grid_json(ranked)[0]["runs"] == 1);
}

TEST_CASE("grid ranks by validation, failed settings last") {
  auto base = small("turtle");
  base.runs = 1;
  base.meta_layers = 1;
  base.meta_width = 4;
  const GridSpec grid{{false}, {HistoryKind::gradients}, {0.0, 0.5}, {1, 2}};
  const auto ranked = grid_search(base, grid);
  REQUIRE(ranked.size() == 4);
  for (std::size_t i = 1; i < ranked.size(); ++i) {
    CHECK(ranked[i - 1].aggregate->best_val.mean <= ranked[i].aggregate->best_val.mean);
  }
  CHECK_THROWS_AS(grid_search(small("maml"), grid), ConfigError);
  CHECK_THROWS_AS(grid_search(base, GridSpec{{}, {}, {}, {}}), ConfigError);
}
