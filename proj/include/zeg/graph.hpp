#pragma once

#include "zeg/ndarray.hpp"

#include <deque>
#include <functional>
#include <string>
#include <vector>

namespace zeg {

/// A named model weight. Frozen parameters enter graphs as constants and never
/// receive gradient.
template <typename Scalar>
struct Parameter {
  std::string name;
  NDArray<Scalar> value;
  NDArray<Scalar> grad;
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string n, NDArray<Scalar> v, bool train = true)
      : name(std::move(n)), value(std::move(v)), trainable(train) {}

  bool has_grad() const { return !grad.is_null(); }
  void zero_grad() { grad = NDArray<Scalar>(); }
};

template <typename Scalar>
class Graph;

/// Handle to one node of a Graph. Cheap to copy; valid while the graph lives.
template <typename Scalar>
class Tensor {
 public:
  Tensor() = default;
  Tensor(Graph<Scalar>* graph, Index id) : graph_(graph), id_(id) {}

  Graph<Scalar>& graph() const { return *graph_; }
  Index node_id() const { return id_; }
  bool valid() const { return graph_ != nullptr; }

  const NDArray<Scalar>& value() const;
  const NDArray<Scalar>& grad() const;
  const Shape& shape() const { return value().shape; }
  Index dim(Index axis) const { return value().dim(axis); }
  Index rank() const { return value().rank(); }
  Index size() const { return value().size(); }
  Scalar item() const { return value().item(); }
  bool requires_grad() const;

 private:
  Graph<Scalar>* graph_ = nullptr;
  Index id_ = -1;
};

/// Dynamically recorded tape. Nodes are appended in execution order, so every
/// input id precedes its consumer; backward() walks them once, in reverse.
template <typename Scalar>
class Graph {
 public:
  using Backward = std::function<void(Graph&, Index self)>;

  struct Node {
    const char* op = "";
    std::vector<Index> inputs;
    NDArray<Scalar> value;
    NDArray<Scalar> grad;
    bool requires_grad = false;
    Parameter<Scalar>* param = nullptr;
    Backward backward;
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Tensor<Scalar> constant(NDArray<Scalar> value) {
    return push(Node{"constant", {}, std::move(value), {}, false, nullptr, {}});
  }

  /// Leaf that collects its own gradient (read back through Tensor::grad()).
  Tensor<Scalar> variable(NDArray<Scalar> value) {
    return push(Node{"variable", {}, std::move(value), {}, true, nullptr, {}});
  }

  /// Leaf bound to a parameter; trainable parameters get their gradient
  /// accumulated into Parameter::grad by backward().
  Tensor<Scalar> parameter(Parameter<Scalar>& p) {
    if (!p.trainable || !grad_enabled_) return constant(p.value);
    return push(Node{"parameter", {}, p.value, {}, true, &p, {}});
  }

  /// Appends an operation node. The backward closure is dropped when no input
  /// requires a gradient.
  Tensor<Scalar> record(const char* op, std::vector<Index> inputs, NDArray<Scalar> value, Backward backward) {
    bool needs = false;
    for (Index id : inputs) needs = needs || nodes_.at(static_cast<std::size_t>(id)).requires_grad;
    Node node{op, std::move(inputs), std::move(value), {}, needs, nullptr, {}};
    if (needs) node.backward = std::move(backward);
    return push(std::move(node));
  }

  /// With gradients disabled every parameter enters as a constant, so no
  /// backward closures are recorded (inference).
  void set_grad_enabled(bool enabled) { grad_enabled_ = enabled; }
  bool grad_enabled() const { return grad_enabled_; }

  const Node& node(Index id) const { return nodes_.at(static_cast<std::size_t>(id)); }
  Index size() const { return static_cast<Index>(nodes_.size()); }
  bool requires_grad(Index id) const { return node(id).requires_grad; }
  const NDArray<Scalar>& value(Index id) const { return node(id).value; }

  /// Gradient buffer of a node, zero-initialised on first access.
  NDArray<Scalar>& grad_buffer(Index id) {
    Node& n = nodes_.at(static_cast<std::size_t>(id));
    if (n.grad.is_null()) n.grad = NDArray<Scalar>(n.value.shape);
    return n.grad;
  }

  template <typename Expr>
  void accumulate(Index id, const Expr& delta) {
    if (!requires_grad(id)) return;
    grad_buffer(id).data += delta;
  }

  void backward(const Tensor<Scalar>& loss) {
    if (loss.size() != 1) {
      throw ShapeError("backward: loss must be scalar, got shape " + shape_string(loss.shape()));
    }
    if (backward_done_) throw std::logic_error("backward: graph already consumed");
    backward_done_ = true;
    if (!requires_grad(loss.node_id())) return;
    grad_buffer(loss.node_id()).data.setOnes();
    visits_ = 0;
    for (Index id = loss.node_id(); id >= 0; --id) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (!n.requires_grad || n.grad.is_null()) continue;
      ++visits_;
      if (n.backward) n.backward(*this, id);
      if (n.param != nullptr) {
        if (n.param->grad.is_null()) n.param->grad = NDArray<Scalar>(n.param->value.shape);
        n.param->grad.data += n.grad.data;
      }
    }
  }

  /// Number of nodes whose gradient was propagated by the last backward().
  Index backward_visits() const { return visits_; }

 private:
  Tensor<Scalar> push(Node node) {
    nodes_.push_back(std::move(node));
    return Tensor<Scalar>(this, static_cast<Index>(nodes_.size()) - 1);
  }

  std::deque<Node> nodes_;  // deque: node references stay valid while the tape grows
  bool backward_done_ = false;
  bool grad_enabled_ = true;
  Index visits_ = 0;
};

template <typename Scalar>
const NDArray<Scalar>& Tensor<Scalar>::value() const {
  return graph_->value(id_);
}

template <typename Scalar>
const NDArray<Scalar>& Tensor<Scalar>::grad() const {
  return graph_->node(id_).grad;
}

template <typename Scalar>
bool Tensor<Scalar>::requires_grad() const {
  return graph_->requires_grad(id_);
}

}  // namespace zeg
