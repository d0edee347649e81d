#pragma once

// Seeded sine-wave few-shot episodes and index-addressed task streams.

#include <cstdint>
#include <iosfwd>
#include <numbers>
#include <string_view>

#include "json.hpp"
#include "metaturtle/rng.hpp"
#include "metaturtle/tensor.hpp"

namespace metaturtle {

struct SineTaskConfig {
  std::size_t k = 5;  // support examples
  std::size_t query = 50;
  double amplitude_min = 0.1, amplitude_max = 5.0;
  double phase_min = 0.0, phase_max = std::numbers::pi;
  double x_min = -5.0, x_max = 5.0;
};

// y = a * sin(x - p). Inputs and targets are column matrices (rows are examples).
struct SineTask {
  double amplitude = 1.0;
  double phase = 0.0;
  Tensor support_x, support_y;  // k x 1
  Tensor query_x, query_y;      // query x 1

  std::size_t k() const { return support_x.shape()[0]; }
};

double sine_target(double amplitude, double phase, double x);

SineTask make_sine_task(double amplitude, double phase, const std::vector<double>& support_x,
                        const std::vector<double>& query_x);

// Draws amplitude, phase, then k support x values, then the query x values.
SineTask sample_task(Rng& rng, const SineTaskConfig& cfg);

enum class Split { train, val, test };
std::string_view split_name(Split s);

class TaskStream {
 public:
  TaskStream(Split split, std::size_t count, std::uint64_t base_seed, SineTaskConfig cfg);

  Split split() const { return split_; }
  std::size_t size() const { return count_; }
  std::uint64_t base_seed() const { return base_seed_; }
  const SineTaskConfig& config() const { return cfg_; }

  // Pure in (split, base_seed, index).
  SineTask at(std::size_t index) const;

 private:
  Split split_;
  std::size_t count_;
  std::uint64_t base_seed_;
  SineTaskConfig cfg_;
};

struct TaskStreams {
  TaskStream train, val, test;
};

// Child seed of split s is derive_seed(master_seed, "split/<name>", 0); task i of
// a stream uses derive_seed(base_seed, "task", i).
TaskStreams make_streams(std::size_t k, std::size_t train_count, std::size_t val_count,
                         std::size_t test_count, std::uint64_t master_seed,
                         SineTaskConfig base = {});

// One JSON line per task: {"a", "p", "support": [[x, y]...], "query": [[x, y]...]}.
nlohmann::ordered_json task_to_json(const SineTask& task);
void dump_tasks_jsonl(const TaskStream& stream, std::size_t limit, std::ostream& out);

}  // namespace metaturtle
