#include "metaturtle/autodiff.hpp"

#include <algorithm>
#include <atomic>
#include <optional>
#include <string>

#include "metaturtle/errors.hpp"

namespace metaturtle {

std::string_view op_name(OpKind op) {
  switch (op) {
    case OpKind::leaf: return "leaf";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::neg: return "neg";
    case OpKind::scale: return "scale";
    case OpKind::add_scalar: return "add_scalar";
    case OpKind::matmul: return "matmul";
    case OpKind::concat_last: return "concat_last";
    case OpKind::slice_last: return "slice_last";
    case OpKind::broadcast: return "broadcast";
    case OpKind::relu: return "relu";
    case OpKind::sigmoid: return "sigmoid";
    case OpKind::sine: return "sine";
    case OpKind::sum: return "sum";
    case OpKind::mean: return "mean";
    case OpKind::square: return "square";
    case OpKind::reshape: return "reshape";
    case OpKind::add_bias: return "add_bias";
    case OpKind::sum_rows: return "sum_rows";
    case OpKind::repeat_rows: return "repeat_rows";
  }
  return "?";
}

namespace testing {
namespace {
std::atomic<bool> g_break_detach{false};
}
void set_break_detach(bool broken) { g_break_detach.store(broken); }
bool break_detach() { return g_break_detach.load(); }
}  // namespace testing

const Tensor& GraphValue::value() const { return graph_->node(id_).value; }
bool GraphValue::requires_grad() const { return graph_->node(id_).requires_grad; }
bool GraphValue::is_leaf() const { return graph_->node(id_).op == OpKind::leaf; }

namespace {

Tensor evaluate(const Graph& g, const Node& n) {
  auto in = [&](std::size_t k) -> const Tensor& { return g.node(n.inputs[k]).value; };
  switch (n.op) {
    case OpKind::leaf: return n.value;
    case OpKind::add: return add(in(0), in(1));
    case OpKind::sub: return sub(in(0), in(1));
    case OpKind::mul: return mul(in(0), in(1));
    case OpKind::neg: return neg(in(0));
    case OpKind::scale: return scale(in(0), n.scalar);
    case OpKind::add_scalar: return add_scalar(in(0), n.scalar);
    case OpKind::matmul: return matmul(in(0), in(1), n.transpose_a, n.transpose_b);
    case OpKind::concat_last: {
      std::vector<const Tensor*> parts;
      parts.reserve(n.inputs.size());
      for (auto id : n.inputs) parts.push_back(&g.node(id).value);
      return concat_last(std::span<const Tensor* const>(parts));
    }
    case OpKind::slice_last: return slice_last(in(0), n.begin, n.end);
    case OpKind::broadcast: return broadcast(in(0), n.target);
    case OpKind::relu: return relu(in(0));
    case OpKind::sigmoid: return sigmoid(in(0));
    case OpKind::sine: return sine(in(0));
    case OpKind::sum: return sum(in(0));
    case OpKind::mean: return mean(in(0));
    case OpKind::square: return square(in(0));
    case OpKind::reshape: return reshape(in(0), n.target);
    case OpKind::add_bias: return add_bias(in(0), in(1));
    case OpKind::sum_rows: return sum_rows(in(0));
    case OpKind::repeat_rows: return repeat_rows(in(0), n.begin);
  }
  throw GradError("evaluate: unknown op");
}

Graph* common_graph(std::initializer_list<GraphValue> values) {
  Graph* g = nullptr;
  for (const auto& v : values) {
    if (!v.valid()) throw std::invalid_argument("autodiff: use of an empty GraphValue");
    if (g && v.graph() != g) throw std::invalid_argument("autodiff: operands from different graphs");
    g = v.graph();
  }
  return g;
}

GraphValue apply(Graph* g, Node n) {
  n.value = evaluate(*g, n);
  n.requires_grad = std::any_of(n.inputs.begin(), n.inputs.end(),
                                [&](std::int32_t id) { return g->node(id).requires_grad; });
  return g->record(std::move(n));
}

GraphValue unary(OpKind op, GraphValue x) {
  Graph* g = common_graph({x});
  Node n;
  n.op = op;
  n.inputs = {x.id()};
  return apply(g, std::move(n));
}

GraphValue binary(OpKind op, GraphValue a, GraphValue b) {
  Graph* g = common_graph({a, b});
  Node n;
  n.op = op;
  n.inputs = {a.id(), b.id()};
  return apply(g, std::move(n));
}

}  // namespace

GraphValue Graph::parameter(Tensor value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = true;
  return record(std::move(n));
}

GraphValue Graph::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  return record(std::move(n));
}

GraphValue Graph::record(Node node) {
  nodes_.push_back(std::move(node));
  return GraphValue(this, static_cast<std::int32_t>(nodes_.size() - 1));
}

bool Graph::replay_matches() const {
  for (const auto& n : nodes_) {
    if (n.op == OpKind::leaf) continue;
    if (!(evaluate(*this, n) == n.value)) return false;
  }
  return true;
}

GraphValue add(GraphValue a, GraphValue b) { return binary(OpKind::add, a, b); }
GraphValue sub(GraphValue a, GraphValue b) { return binary(OpKind::sub, a, b); }
GraphValue mul(GraphValue a, GraphValue b) { return binary(OpKind::mul, a, b); }
GraphValue neg(GraphValue a) { return unary(OpKind::neg, a); }

GraphValue scale(GraphValue a, double c) {
  Graph* g = common_graph({a});
  Node n;
  n.op = OpKind::scale;
  n.inputs = {a.id()};
  n.scalar = c;
  return apply(g, std::move(n));
}

GraphValue add_scalar(GraphValue a, double c) {
  Graph* g = common_graph({a});
  Node n;
  n.op = OpKind::add_scalar;
  n.inputs = {a.id()};
  n.scalar = c;
  return apply(g, std::move(n));
}

GraphValue matmul(GraphValue a, GraphValue b, bool transpose_a, bool transpose_b) {
  Graph* g = common_graph({a, b});
  Node n;
  n.op = OpKind::matmul;
  n.inputs = {a.id(), b.id()};
  n.transpose_a = transpose_a;
  n.transpose_b = transpose_b;
  return apply(g, std::move(n));
}

GraphValue concat_last(std::span<const GraphValue> parts) {
  if (parts.empty()) throw ShapeError("concat_last: no inputs");
  Graph* g = parts[0].graph();
  Node n;
  n.op = OpKind::concat_last;
  for (const auto& p : parts) {
    common_graph({parts[0], p});
    n.inputs.push_back(p.id());
  }
  return apply(g, std::move(n));
}

GraphValue slice_last(GraphValue x, std::size_t begin, std::size_t end) {
  Graph* g = common_graph({x});
  Node n;
  n.op = OpKind::slice_last;
  n.inputs = {x.id()};
  n.begin = begin;
  n.end = end;
  return apply(g, std::move(n));
}

GraphValue broadcast(GraphValue s, const Shape& shape) {
  Graph* g = common_graph({s});
  Node n;
  n.op = OpKind::broadcast;
  n.inputs = {s.id()};
  n.target = shape;
  return apply(g, std::move(n));
}

GraphValue relu(GraphValue x) { return unary(OpKind::relu, x); }
GraphValue sigmoid(GraphValue x) { return unary(OpKind::sigmoid, x); }
GraphValue sine(GraphValue x) { return unary(OpKind::sine, x); }
GraphValue sum(GraphValue x) { return unary(OpKind::sum, x); }
GraphValue mean(GraphValue x) { return unary(OpKind::mean, x); }
GraphValue square(GraphValue x) { return unary(OpKind::square, x); }

GraphValue reshape(GraphValue x, const Shape& shape) {
  Graph* g = common_graph({x});
  Node n;
  n.op = OpKind::reshape;
  n.inputs = {x.id()};
  n.target = shape;
  return apply(g, std::move(n));
}

GraphValue add_bias(GraphValue x, GraphValue bias) { return binary(OpKind::add_bias, x, bias); }
GraphValue sum_rows(GraphValue x) { return unary(OpKind::sum_rows, x); }

GraphValue repeat_rows(GraphValue v, std::size_t rows) {
  Graph* g = common_graph({v});
  Node n;
  n.op = OpKind::repeat_rows;
  n.inputs = {v.id()};
  n.begin = rows;
  return apply(g, std::move(n));
}

GraphValue mse_loss(GraphValue pred, const Tensor& target) {
  if (pred.shape() != target.shape()) {
    throw ShapeError("mse_loss: length mismatch " + shape_string(pred.shape()) + " vs " +
                     shape_string(target.shape()));
  }
  if (target.numel() == 0) throw ShapeError("mse_loss: empty input");
  GraphValue t = pred.graph()->constant(target);
  return mean(square(sub(pred, t)));
}

GraphValue detach(GraphValue v) {
  common_graph({v});
  if (testing::break_detach()) return reshape(v, v.shape());
  return v.graph()->constant(v.value());
}

namespace {

// Adjoint arithmetic on graph nodes: used when create_graph is set.
struct GraphMode {
  using Value = GraphValue;
  Graph& g;
  GraphValue in(const Node& n, std::size_t k) const { return GraphValue(&g, n.inputs[k]); }
  GraphValue self(std::int32_t id) const { return GraphValue(&g, id); }
  GraphValue constant(Tensor t) const { return g.constant(std::move(t)); }
  void accumulate(std::optional<GraphValue>& slot, GraphValue v) const {
    slot = slot ? add(*slot, v) : v;
  }
  GraphValue finish(GraphValue v) const { return v; }
};

// Adjoint arithmetic on plain tensors: used for first-order gradients.
struct TensorMode {
  using Value = Tensor;
  Graph& g;
  const Tensor& in(const Node& n, std::size_t k) const { return g.node(n.inputs[k]).value; }
  const Tensor& self(std::int32_t id) const { return g.node(id).value; }
  Tensor constant(Tensor t) const { return t; }
  void accumulate(std::optional<Tensor>& slot, Tensor v) const {
    slot = slot ? add(*slot, v) : std::move(v);
  }
  GraphValue finish(Tensor v) const { return g.constant(std::move(v)); }
};

// Derivative rules. Every rule is expressed with the same operation set, so
// instantiating it with GraphMode yields differentiable adjoints.
template <class Mode, class Emit>
void backward_rule(const Mode& m, const Node& n, std::int32_t id,
                   typename Mode::Value gout, const std::vector<char>& need, Emit emit) {
  auto wants = [&](std::size_t k) { return need[static_cast<std::size_t>(n.inputs[k])] != 0; };
  switch (n.op) {
    case OpKind::leaf:
      return;
    // gout is moved into its last use; emitting a plain tensor otherwise copies it.
    case OpKind::add:
      if (wants(0) && wants(1)) emit(0, gout);
      if (wants(1)) emit(1, std::move(gout));
      else if (wants(0)) emit(0, std::move(gout));
      return;
    case OpKind::sub:
      if (wants(1)) emit(1, neg(gout));
      if (wants(0)) emit(0, std::move(gout));
      return;
    case OpKind::mul:
      if (wants(0)) emit(0, mul(gout, m.in(n, 1)));
      if (wants(1)) emit(1, mul(gout, m.in(n, 0)));
      return;
    case OpKind::neg:
      emit(0, neg(gout));
      return;
    case OpKind::scale:
      emit(0, scale(gout, n.scalar));
      return;
    case OpKind::add_scalar:
      emit(0, std::move(gout));
      return;
    case OpKind::matmul: {
      const bool ta = n.transpose_a, tb = n.transpose_b;
      if (wants(0)) {
        emit(0, ta ? matmul(m.in(n, 1), gout, tb, true) : matmul(gout, m.in(n, 1), false, !tb));
      }
      if (wants(1)) {
        emit(1, tb ? matmul(gout, m.in(n, 0), true, ta) : matmul(m.in(n, 0), gout, !ta, false));
      }
      return;
    }
    case OpKind::concat_last: {
      std::size_t offset = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        const auto width = m.g.node(n.inputs[k]).value.cols();
        if (wants(k)) emit(k, slice_last(gout, offset, offset + width));
        offset += width;
      }
      return;
    }
    case OpKind::slice_last: {
      const Tensor& x = m.g.node(n.inputs[0]).value;
      const bool matrix = x.rank() == 2;
      const std::size_t rows = matrix ? x.shape()[0] : 1;
      auto zeros = [&](std::size_t width) {
        return m.constant(Tensor::zeros(matrix ? Shape{rows, width} : Shape{width}));
      };
      std::vector<typename Mode::Value> parts;
      if (n.begin > 0) parts.push_back(zeros(n.begin));
      parts.push_back(gout);
      if (n.end < x.cols()) parts.push_back(zeros(x.cols() - n.end));
      emit(0, parts.size() == 1 ? gout : concat_last(std::span<const typename Mode::Value>(parts)));
      return;
    }
    case OpKind::broadcast: {
      const Shape& src = m.g.node(n.inputs[0]).value.shape();
      auto total = sum(gout);
      emit(0, src.empty() ? total : reshape(total, src));
      return;
    }
    case OpKind::relu:
      // relu'(0) = 0; the mask is piecewise constant so it enters as a constant.
      emit(0, mul(gout, m.constant(relu_mask(m.g.node(n.inputs[0]).value))));
      return;
    case OpKind::sigmoid: {
      auto s = m.self(id);
      emit(0, mul(gout, mul(s, add_scalar(neg(s), 1.0))));
      return;
    }
    case OpKind::sine:
      throw GradError("grad: op 'sine' has no derivative defined");
    case OpKind::sum:
      emit(0, broadcast(gout, m.g.node(n.inputs[0]).value.shape()));
      return;
    case OpKind::mean: {
      const Tensor& x = m.g.node(n.inputs[0]).value;
      emit(0, scale(broadcast(gout, x.shape()), 1.0 / static_cast<double>(x.numel())));
      return;
    }
    case OpKind::square:
      emit(0, mul(gout, scale(m.in(n, 0), 2.0)));
      return;
    case OpKind::reshape:
      emit(0, reshape(gout, m.g.node(n.inputs[0]).value.shape()));
      return;
    case OpKind::add_bias:
      if (wants(1)) emit(1, sum_rows(gout));
      if (wants(0)) emit(0, std::move(gout));
      return;
    case OpKind::sum_rows:
      emit(0, repeat_rows(gout, m.g.node(n.inputs[0]).value.shape()[0]));
      return;
    case OpKind::repeat_rows:
      emit(0, sum_rows(gout));
      return;
  }
}

template <class Mode>
std::vector<GraphValue> backprop(const Mode& m, GraphValue output,
                                 std::span<const GraphValue> wrt) {
  using V = typename Mode::Value;
  Graph& g = m.g;
  const auto out = static_cast<std::size_t>(output.id());

  // need[i]: node i lies on a path from some wrt entry to the output.
  std::vector<char> need(out + 1, 0);
  std::vector<char> is_wrt(out + 1, 0);
  std::size_t lo = out + 1;
  for (const auto& w : wrt) {
    const auto id = static_cast<std::size_t>(w.id());
    if (id <= out) {
      is_wrt[id] = 1;
      lo = std::min(lo, id);
    }
  }
  for (std::size_t i = lo; i <= out; ++i) {
    if (is_wrt[i]) {
      need[i] = 1;
      continue;
    }
    const Node& n = g.node(static_cast<std::int32_t>(i));
    if (!n.requires_grad) continue;
    for (auto in : n.inputs) {
      if (static_cast<std::size_t>(in) >= lo && need[static_cast<std::size_t>(in)]) {
        need[i] = 1;
        break;
      }
    }
  }

  std::vector<std::optional<V>> adj(out + 1);
  if (need[out]) adj[out] = m.constant(Tensor::full(output.shape(), 1.0));

  for (std::size_t i = out + 1; i-- > lo;) {
    if (!adj[i] || !need[i]) continue;
    const Node& n = g.node(static_cast<std::int32_t>(i));
    if (n.op != OpKind::leaf) {
      V gout = is_wrt[i] ? *adj[i] : std::move(*adj[i]);
      backward_rule(m, n, static_cast<std::int32_t>(i), std::move(gout), need, [&](std::size_t k, V v) {
        m.accumulate(adj[static_cast<std::size_t>(n.inputs[k])], std::move(v));
      });
    }
    if (!is_wrt[i]) adj[i].reset();
  }

  std::vector<GraphValue> result;
  result.reserve(wrt.size());
  for (const auto& w : wrt) {
    const auto id = static_cast<std::size_t>(w.id());
    if (id <= out && adj[id]) {
      result.push_back(m.finish(*adj[id]));
    } else {
      result.push_back(g.constant(Tensor::zeros(w.shape())));
    }
  }
  return result;
}

}  // namespace

std::vector<GraphValue> grad(GraphValue output, std::span<const GraphValue> wrt,
                             bool create_graph) {
  Graph* g = common_graph({output});
  if (output.value().numel() != 1) {
    throw GradError("grad: output must be a scalar, got shape " + shape_string(output.shape()));
  }
  for (const auto& w : wrt) {
    common_graph({output, w});
    if (!w.requires_grad()) {
      throw GradError("grad: differentiation target (node " + std::to_string(w.id()) +
                      ") does not require a gradient");
    }
  }
  if (create_graph) return backprop(GraphMode{*g}, output, wrt);
  return backprop(TensorMode{*g}, output, wrt);
}

GraphValue grad(GraphValue output, GraphValue wrt, bool create_graph) {
  return grad(output, std::span<const GraphValue>(&wrt, 1), create_graph).front();
}

}  // namespace metaturtle
