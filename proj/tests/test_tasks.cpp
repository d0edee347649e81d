// Sine episodes and index-addressed task streams.

#include <cmath>
#include <numbers>
#include <sstream>

#include "doctest.h"
#include "metaturtle/tasks.hpp"

using namespace metaturtle;
using std::numbers::pi;

TEST_CASE("sine identities") {
  CHECK(sine_target(1.0, 0.0, pi / 2) == 1.0);
  CHECK(sine_target(2.0, pi / 2, pi / 2) == 0.0);
  const auto t = make_sine_task(1.0, 0.0, {pi / 2}, {0.0, pi / 2});
  CHECK(t.support_y[0] == 1.0);
  CHECK(t.query_y[1] == 1.0);
  CHECK(t.support_x.shape() == Shape{1, 1});
  CHECK(t.query_x.shape() == Shape{2, 1});
}

TEST_CASE("sampled tasks respect ranges and targets exactly") {
  const TaskStream s(Split::train, 500, 99, {});
  for (std::size_t i = 0; i < s.size(); ++i) {
    const auto t = s.at(i);
    CHECK(t.k() == 5);
    CHECK(t.query_x.shape() == Shape{50, 1});
    CHECK(t.amplitude >= 0.1);
    CHECK(t.amplitude <= 5.0);
    CHECK(t.phase >= 0.0);
    CHECK(t.phase <= pi);
    auto check = [&](const Tensor& x, const Tensor& y) {
      for (std::size_t r = 0; r < x.numel(); ++r) {
        REQUIRE(x[r] >= -5.0);
        REQUIRE(x[r] <= 5.0);
        REQUIRE(y[r] == t.amplitude * std::sin(x[r] - t.phase));
        REQUIRE(std::abs(y[r]) <= t.amplitude);
      }
    };
    check(t.support_x, t.support_y);
    check(t.query_x, t.query_y);
  }
}

TEST_CASE("k is configurable and must be positive") {
  SineTaskConfig cfg;
  cfg.k = 10;
  CHECK(TaskStream(Split::val, 3, 1, cfg).at(2).k() == 10);
  cfg.k = 0;
  Rng rng(1);
  CHECK_THROWS_AS(sample_task(rng, cfg), std::invalid_argument);
  CHECK_THROWS_AS(TaskStream(Split::val, 0, 1, {}), std::invalid_argument);
  CHECK_THROWS_AS(TaskStream(Split::val, 3, 1, {}).at(3), std::out_of_range);
}

TEST_CASE("default stream sizes") {
  const auto s = make_streams(5, 70000, 1000, 2000, 1);
  CHECK(s.train.size() == 70000);
  CHECK(s.val.size() == 1000);
  CHECK(s.test.size() == 2000);
  CHECK(s.train.split() == Split::train);
  CHECK(s.test.config().k == 5);
}

TEST_CASE("streams are index-addressed and replayable") {
  const auto a = make_streams(5, 100, 10, 10, 7);
  const auto b = make_streams(5, 100, 10, 10, 7);
  const auto c = make_streams(5, 100, 10, 10, 8);
  const auto untouched = b.val.at(7);
  for (std::size_t i = 0; i < a.train.size(); ++i) (void)a.train.at(i);
  const auto after = a.val.at(7);
  CHECK(after.amplitude == untouched.amplitude);
  CHECK(after.phase == untouched.phase);
  CHECK(after.support_x == untouched.support_x);
  CHECK(after.query_y == untouched.query_y);
  CHECK(a.train.at(3).support_x == b.train.at(3).support_x);
  CHECK_FALSE(a.train.at(3).support_x == c.train.at(3).support_x);
  CHECK_FALSE(a.train.base_seed() == a.val.base_seed());
  CHECK_FALSE(a.val.base_seed() == a.test.base_seed());
}

TEST_CASE("amplitude and phase are uniform over 10000 tasks") {
  const TaskStream s(Split::train, 10000, 2024, {});
  double sa = 0, sp = 0, amin = 1e9, amax = -1e9, pmin = 1e9, pmax = -1e9;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const auto t = s.at(i);
    sa += t.amplitude, sp += t.phase;
    amin = std::min(amin, t.amplitude), amax = std::max(amax, t.amplitude);
    pmin = std::min(pmin, t.phase), pmax = std::max(pmax, t.phase);
  }
  const double n = 10000.0;
  CHECK(amin >= 0.1);
  CHECK(amax <= 5.0);
  CHECK(pmin >= 0.0);
  CHECK(pmax <= pi);
  // standard error of a uniform mean: (hi - lo) / sqrt(12 n)
  CHECK(std::abs(sa / n - 2.55) <= 3 * 4.9 / std::sqrt(12 * n));
  CHECK(std::abs(sp / n - pi / 2) <= 3 * pi / std::sqrt(12 * n));
}

TEST_CASE("jsonl dump") {
  const TaskStream s(Split::test, 4, 5, {});
  std::ostringstream out;
  dump_tasks_jsonl(s, 3, out);
  std::istringstream in(out.str());
  std::string line;
  std::size_t count = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    const auto t = s.at(count++);
    CHECK(j.at("a").get<double>() == t.amplitude);
    CHECK(j.at("p").get<double>() == t.phase);
    REQUIRE(j.at("support").size() == 5);
    REQUIRE(j.at("query").size() == 50);
    CHECK(j["support"][2][0].get<double>() == t.support_x[2]);
    CHECK(j["query"][49][1].get<double>() == t.query_y[49]);
  }
  CHECK(count == 3);
}
