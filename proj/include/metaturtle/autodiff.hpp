#pragma once

// Reverse-mode automatic differentiation over an append-only graph.
//
// A Graph records every operation in execution order. grad() walks the record
// backwards; with create_graph set, the adjoint computations are themselves
// appended to the graph, so gradients can be differentiated again. Every
// derivative rule is written in terms of the same operation set, which keeps
// the set closed under differentiation.
//
// A Graph and its GraphValues belong to one thread. Independent graphs may be
// used concurrently.

#include <cstdint>
#include <deque>
#include <span>
#include <string_view>
#include <vector>

#include "metaturtle/tensor.hpp"

namespace metaturtle {

enum class OpKind : std::uint8_t {
  leaf,
  add,
  sub,
  mul,
  neg,
  scale,
  add_scalar,
  matmul,
  concat_last,
  slice_last,
  broadcast,
  relu,
  sigmoid,
  sine,  // value-only: differentiating through it is an error
  sum,
  mean,
  square,
  reshape,
  add_bias,
  sum_rows,
  repeat_rows,
};

std::string_view op_name(OpKind op);

class Graph;

// Handle to a node of a Graph. Cheap to copy; valid while the Graph lives.
class GraphValue {
 public:
  GraphValue() = default;
  GraphValue(Graph* graph, std::int32_t id) : graph_(graph), id_(id) {}

  Graph* graph() const noexcept { return graph_; }
  std::int32_t id() const noexcept { return id_; }
  bool valid() const noexcept { return graph_ != nullptr; }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  bool is_leaf() const;

 private:
  Graph* graph_ = nullptr;
  std::int32_t id_ = -1;
};

struct Node {
  OpKind op = OpKind::leaf;
  std::vector<std::int32_t> inputs;
  Tensor value;
  bool requires_grad = false;
  // Op attributes; meaning depends on op.
  double scalar = 0.0;                 // scale, add_scalar
  bool transpose_a = false;            // matmul
  bool transpose_b = false;            // matmul
  std::size_t begin = 0, end = 0;      // slice_last; repeat_rows uses begin as row count
  Shape target;                        // broadcast, reshape
};

class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // Trainable input.
  GraphValue parameter(Tensor value);
  // Input that never receives a gradient.
  GraphValue constant(Tensor value);

  std::size_t size() const noexcept { return nodes_.size(); }
  const Node& node(std::int32_t id) const { return nodes_.at(static_cast<std::size_t>(id)); }

  // Recomputes every non-leaf node from its inputs and reports whether all
  // values are reproduced bit for bit.
  bool replay_matches() const;

  GraphValue record(Node node);

 private:
  std::deque<Node> nodes_;
};

// Operation library. Inputs must belong to the same graph.
GraphValue add(GraphValue a, GraphValue b);
GraphValue sub(GraphValue a, GraphValue b);
GraphValue mul(GraphValue a, GraphValue b);
GraphValue neg(GraphValue a);
GraphValue scale(GraphValue a, double c);
GraphValue add_scalar(GraphValue a, double c);
GraphValue matmul(GraphValue a, GraphValue b, bool transpose_a = false, bool transpose_b = false);
GraphValue concat_last(std::span<const GraphValue> parts);
GraphValue slice_last(GraphValue x, std::size_t begin, std::size_t end);
GraphValue broadcast(GraphValue s, const Shape& shape);
GraphValue relu(GraphValue x);
GraphValue sigmoid(GraphValue x);
GraphValue sine(GraphValue x);
GraphValue sum(GraphValue x);
GraphValue mean(GraphValue x);
GraphValue square(GraphValue x);
GraphValue reshape(GraphValue x, const Shape& shape);
GraphValue add_bias(GraphValue x, GraphValue bias);
GraphValue sum_rows(GraphValue x);
GraphValue repeat_rows(GraphValue v, std::size_t rows);

// (1/m) * sum_i (pred_i - target_i)^2 for equally shaped pred and target.
GraphValue mse_loss(GraphValue pred, const Tensor& target);

// Same value as v, recorded as a leaf that does not require a gradient.
GraphValue detach(GraphValue v);

// d output / d wrt[i] for a one-element output. Entries of wrt that the output
// does not depend on get zeros. With create_graph the results are graph nodes
// that can be differentiated again; otherwise they are detached leaves.
std::vector<GraphValue> grad(GraphValue output, std::span<const GraphValue> wrt,
                             bool create_graph = false);
GraphValue grad(GraphValue output, GraphValue wrt, bool create_graph = false);

namespace testing {
// Fault injection for the verification suite: when set, detach() records an
// identity op that still propagates gradients.
void set_break_detach(bool broken);
bool break_detach();
}  // namespace testing

}  // namespace metaturtle
