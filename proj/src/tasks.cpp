#include "metaturtle/tasks.hpp"

#include <cmath>
#include <ostream>
#include <stdexcept>
#include <string>

namespace metaturtle {

double sine_target(double amplitude, double phase, double x) {
  return amplitude * std::sin(x - phase);
}

SineTask make_sine_task(double amplitude, double phase, const std::vector<double>& support_x,
                        const std::vector<double>& query_x) {
  auto column = [&](const std::vector<double>& xs, bool targets) {
    std::vector<double> v(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) {
      v[i] = targets ? sine_target(amplitude, phase, xs[i]) : xs[i];
    }
    return Tensor::matrix(xs.size(), 1, std::move(v));
  };
  SineTask t;
  t.amplitude = amplitude;
  t.phase = phase;
  t.support_x = column(support_x, false);
  t.support_y = column(support_x, true);
  t.query_x = column(query_x, false);
  t.query_y = column(query_x, true);
  return t;
}

SineTask sample_task(Rng& rng, const SineTaskConfig& cfg) {
  if (cfg.k < 1) throw std::invalid_argument("sample_task: k must be >= 1");
  const double a = rng.uniform(cfg.amplitude_min, cfg.amplitude_max);
  const double p = rng.uniform(cfg.phase_min, cfg.phase_max);
  std::vector<double> sx(cfg.k), qx(cfg.query);
  for (auto& x : sx) x = rng.uniform(cfg.x_min, cfg.x_max);
  for (auto& x : qx) x = rng.uniform(cfg.x_min, cfg.x_max);
  return make_sine_task(a, p, sx, qx);
}

std::string_view split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

TaskStream::TaskStream(Split split, std::size_t count, std::uint64_t base_seed, SineTaskConfig cfg)
    : split_(split), count_(count), base_seed_(base_seed), cfg_(cfg) {
  if (count_ < 1) throw std::invalid_argument("task stream: count must be >= 1");
}

SineTask TaskStream::at(std::size_t index) const {
  if (index >= count_) {
    throw std::out_of_range("task stream '" + std::string(split_name(split_)) + "': index " +
                            std::to_string(index) + " >= " + std::to_string(count_));
  }
  Rng rng(derive_seed(base_seed_, "task", index));
  return sample_task(rng, cfg_);
}

TaskStreams make_streams(std::size_t k, std::size_t train_count, std::size_t val_count,
                         std::size_t test_count, std::uint64_t master_seed, SineTaskConfig base) {
  base.k = k;
  auto seed = [&](Split s) {
    return derive_seed(master_seed, "split/" + std::string(split_name(s)), 0);
  };
  return TaskStreams{
      TaskStream(Split::train, train_count, seed(Split::train), base),
      TaskStream(Split::val, val_count, seed(Split::val), base),
      TaskStream(Split::test, test_count, seed(Split::test), base),
  };
}

nlohmann::ordered_json task_to_json(const SineTask& task) {
  auto pairs = [](const Tensor& x, const Tensor& y) {
    auto arr = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < x.numel(); ++i) arr.push_back({x[i], y[i]});
    return arr;
  };
  nlohmann::ordered_json j;
  j["a"] = task.amplitude;
  j["p"] = task.phase;
  j["support"] = pairs(task.support_x, task.support_y);
  j["query"] = pairs(task.query_x, task.query_y);
  return j;
}

void dump_tasks_jsonl(const TaskStream& stream, std::size_t limit, std::ostream& out) {
  const auto n = std::min(limit, stream.size());
  for (std::size_t i = 0; i < n; ++i) out << task_to_json(stream.at(i)).dump() << '\n';
}

}  // namespace metaturtle
