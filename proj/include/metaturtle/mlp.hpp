#pragma once

// Functional multilayer perceptrons. Weights are never stored inside the
// network: every forward pass receives an explicit ParamSet, so per-task fast
// weights and the meta-learned initialization are ordinary values.
//
// Layer l owns "layer<l>.weight" (in x out) and "layer<l>.bias" (out); rows of
// the input batch are examples. This canonical order defines flatten().

#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"
#include "metaturtle/autodiff.hpp"

namespace metaturtle {

enum class Activation { identity, relu, sigmoid };

std::string_view activation_name(Activation a);
Activation parse_activation(std::string_view name);

struct MlpSpec {
  std::vector<std::size_t> widths;  // input, hidden..., output
  Activation hidden = Activation::relu;
  Activation output = Activation::identity;

  std::size_t layers() const { return widths.empty() ? 0 : widths.size() - 1; }
  std::size_t param_count() const;
  // Throws std::invalid_argument unless widths has >= min_hidden + 2 entries, all >= 1.
  void validate(std::size_t min_hidden = 1) const;

  // 1-40-40-1 relu regression network used for sine tasks.
  static MlpSpec sine_base_learner();
};

struct NamedTensor {
  std::string name;
  Tensor value;
  bool operator==(const NamedTensor&) const = default;
};

// Stored parameter values in canonical order.
using ParamValues = std::vector<NamedTensor>;

// Parameters bound into a graph, in canonical order.
struct ParamSet {
  std::vector<std::string> names;
  std::vector<GraphValue> values;

  std::size_t size() const { return values.size(); }
  const GraphValue& at(std::string_view name) const;
  void push_back(std::string name, GraphValue value);
};

// Names and shapes, enough to unflatten a parameter vector.
using ParamLayout = std::vector<std::pair<std::string, Shape>>;

ParamLayout layout_of(const MlpSpec& spec);
ParamLayout layout_of(const ParamValues& values);
ParamLayout layout_of(const ParamSet& params);
std::size_t layout_numel(const ParamLayout& layout);

// Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero; deterministic in seed.
ParamValues init_params(const MlpSpec& spec, std::uint64_t seed);

GraphValue forward(const MlpSpec& spec, const ParamSet& params, GraphValue x);

// Concatenation of all parameters (row-major) in canonical order.
GraphValue flatten(const ParamSet& params);
ParamSet unflatten(const ParamLayout& layout, GraphValue vector);
ParamSet unflatten(const MlpSpec& spec, GraphValue vector);

ParamSet bind_params(Graph& g, const ParamValues& values, bool trainable);
ParamValues values_of(const ParamSet& params);
ParamSet detach(const ParamSet& params);
// Entries whose name starts with `prefix`, with the prefix removed.
ParamSet select(const ParamSet& params, std::string_view prefix);
ParamValues select(const ParamValues& values, std::string_view prefix);
ParamValues prefixed(const ParamValues& values, std::string_view prefix);

// {name: {"shape": [...], "data": [...]}} preserving canonical order.
nlohmann::ordered_json params_to_json(const ParamValues& values);
ParamValues params_from_json(const nlohmann::ordered_json& j);

}  // namespace metaturtle
