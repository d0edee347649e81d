#include "metaturtle/mlp.hpp"

#include <cmath>
#include <stdexcept>

#include "metaturtle/errors.hpp"
#include "metaturtle/rng.hpp"

namespace metaturtle {

std::string_view activation_name(Activation a) {
  switch (a) {
    case Activation::identity: return "identity";
    case Activation::relu: return "relu";
    case Activation::sigmoid: return "sigmoid";
  }
  return "?";
}

Activation parse_activation(std::string_view name) {
  if (name == "identity") return Activation::identity;
  if (name == "relu") return Activation::relu;
  if (name == "sigmoid") return Activation::sigmoid;
  throw std::invalid_argument("unknown activation '" + std::string(name) + "'");
}

std::size_t MlpSpec::param_count() const {
  std::size_t n = 0;
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) n += widths[l] * widths[l + 1] + widths[l + 1];
  return n;
}

void MlpSpec::validate(std::size_t min_hidden) const {
  if (widths.size() < min_hidden + 2) {
    throw std::invalid_argument("mlp: need at least " + std::to_string(min_hidden) +
                                " hidden layer(s), got " + std::to_string(widths.size()) +
                                " widths");
  }
  for (auto w : widths) {
    if (w == 0) throw std::invalid_argument("mlp: layer widths must be >= 1");
  }
}

MlpSpec MlpSpec::sine_base_learner() { return MlpSpec{{1, 40, 40, 1}}; }

const GraphValue& ParamSet::at(std::string_view name) const {
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (names[i] == name) return values[i];
  }
  throw std::out_of_range("param set has no entry '" + std::string(name) + "'");
}

void ParamSet::push_back(std::string name, GraphValue value) {
  names.push_back(std::move(name));
  values.push_back(value);
}

namespace {
std::string weight_name(std::size_t l) { return "layer" + std::to_string(l) + ".weight"; }
std::string bias_name(std::size_t l) { return "layer" + std::to_string(l) + ".bias"; }

GraphValue activate(Activation a, GraphValue x) {
  switch (a) {
    case Activation::identity: return x;
    case Activation::relu: return relu(x);
    case Activation::sigmoid: return sigmoid(x);
  }
  return x;
}
}  // namespace

ParamLayout layout_of(const MlpSpec& spec) {
  ParamLayout layout;
  for (std::size_t l = 0; l < spec.layers(); ++l) {
    layout.emplace_back(weight_name(l), Shape{spec.widths[l], spec.widths[l + 1]});
    layout.emplace_back(bias_name(l), Shape{spec.widths[l + 1]});
  }
  return layout;
}

ParamLayout layout_of(const ParamValues& values) {
  ParamLayout layout;
  for (const auto& v : values) layout.emplace_back(v.name, v.value.shape());
  return layout;
}

ParamLayout layout_of(const ParamSet& params) {
  ParamLayout layout;
  for (std::size_t i = 0; i < params.size(); ++i) {
    layout.emplace_back(params.names[i], params.values[i].shape());
  }
  return layout;
}

std::size_t layout_numel(const ParamLayout& layout) {
  std::size_t n = 0;
  for (const auto& [name, shape] : layout) n += shape_numel(shape);
  return n;
}

ParamValues init_params(const MlpSpec& spec, std::uint64_t seed) {
  Rng rng(seed);
  ParamValues out;
  for (std::size_t l = 0; l < spec.layers(); ++l) {
    const auto fan_in = spec.widths[l], fan_out = spec.widths[l + 1];
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::vector<double> w(fan_in * fan_out);
    for (auto& v : w) v = rng.uniform(-bound, bound);
    out.push_back({weight_name(l), Tensor::matrix(fan_in, fan_out, std::move(w))});
    out.push_back({bias_name(l), Tensor::zeros({fan_out})});
  }
  return out;
}

GraphValue forward(const MlpSpec& spec, const ParamSet& params, GraphValue x) {
  if (params.size() != 2 * spec.layers()) {
    throw ShapeError("forward: expected " + std::to_string(2 * spec.layers()) +
                     " parameter tensors, got " + std::to_string(params.size()));
  }
  if (x.shape().size() != 2 || x.shape()[1] != spec.widths.front()) {
    throw ShapeError("forward: input " + shape_string(x.shape()) + " does not match width " +
                     std::to_string(spec.widths.front()));
  }
  GraphValue h = x;
  for (std::size_t l = 0; l < spec.layers(); ++l) {
    const auto& w = params.values[2 * l];
    const auto& b = params.values[2 * l + 1];
    if (w.shape() != Shape{spec.widths[l], spec.widths[l + 1]} ||
        b.shape() != Shape{spec.widths[l + 1]}) {
      throw ShapeError("forward: layer " + std::to_string(l) + " has shapes " +
                       shape_string(w.shape()) + ", " + shape_string(b.shape()));
    }
    h = add_bias(matmul(h, w), b);
    h = activate(l + 1 == spec.layers() ? spec.output : spec.hidden, h);
  }
  return h;
}

GraphValue flatten(const ParamSet& params) {
  if (params.size() == 0) throw ShapeError("flatten: empty parameter set");
  std::vector<GraphValue> parts;
  parts.reserve(params.size());
  for (const auto& v : params.values) parts.push_back(reshape(v, {v.value().numel()}));
  if (parts.size() == 1) return parts.front();
  return concat_last(parts);
}

ParamSet unflatten(const ParamLayout& layout, GraphValue vector) {
  const auto n = layout_numel(layout);
  if (vector.shape() != Shape{n}) {
    throw ShapeError("unflatten: expected a vector of length " + std::to_string(n) + ", got " +
                     shape_string(vector.shape()));
  }
  ParamSet out;
  std::size_t offset = 0;
  for (const auto& [name, shape] : layout) {
    const auto size = shape_numel(shape);
    out.push_back(name, reshape(slice_last(vector, offset, offset + size), shape));
    offset += size;
  }
  return out;
}

ParamSet unflatten(const MlpSpec& spec, GraphValue vector) {
  return unflatten(layout_of(spec), vector);
}

ParamSet bind_params(Graph& g, const ParamValues& values, bool trainable) {
  ParamSet out;
  for (const auto& v : values) {
    out.push_back(v.name, trainable ? g.parameter(v.value) : g.constant(v.value));
  }
  return out;
}

ParamValues values_of(const ParamSet& params) {
  ParamValues out;
  for (std::size_t i = 0; i < params.size(); ++i) {
    out.push_back({params.names[i], params.values[i].value()});
  }
  return out;
}

ParamSet detach(const ParamSet& params) {
  ParamSet out;
  for (std::size_t i = 0; i < params.size(); ++i) {
    out.push_back(params.names[i], detach(params.values[i]));
  }
  return out;
}

ParamSet select(const ParamSet& params, std::string_view prefix) {
  ParamSet out;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params.names[i].starts_with(prefix)) {
      out.push_back(params.names[i].substr(prefix.size()), params.values[i]);
    }
  }
  return out;
}

ParamValues select(const ParamValues& values, std::string_view prefix) {
  ParamValues out;
  for (const auto& v : values) {
    if (v.name.starts_with(prefix)) out.push_back({v.name.substr(prefix.size()), v.value});
  }
  return out;
}

ParamValues prefixed(const ParamValues& values, std::string_view prefix) {
  ParamValues out;
  for (const auto& v : values) out.push_back({std::string(prefix) + v.name, v.value});
  return out;
}

nlohmann::ordered_json params_to_json(const ParamValues& values) {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (const auto& v : values) {
    j[v.name] = {{"shape", v.value.shape()}, {"data", v.value.values()}};
  }
  return j;
}

ParamValues params_from_json(const nlohmann::ordered_json& j) {
  if (!j.is_object()) throw std::invalid_argument("param json: expected an object");
  ParamValues out;
  for (const auto& [name, entry] : j.items()) {
    out.push_back({name, Tensor(entry.at("shape").get<Shape>(),
                                entry.at("data").get<std::vector<double>>())});
  }
  return out;
}

}  // namespace metaturtle
