// Copyright (c) 2026, The mixcpt Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mixcpt/error.hpp"
#include "mixcpt/tensor.hpp"

namespace mixcpt {

template <Real T>
class Graph;

/// Handle to a node recorded on a Graph.
template <Real T>
class Var {
 public:
  Var() = default;
  Var(Graph<T>* graph, std::size_t id) : graph_(graph), id_(id) {}

  Graph<T>& graph() const { return *graph_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return graph_ != nullptr; }

  const Tensor<T>& value() const { return graph_->value(id_); }
  const Shape& shape() const { return value().shape(); }
  std::span<const T> grad() const { return graph_->value(id_).grad(); }
  bool requires_grad() const { return value().requires_grad(); }

 private:
  Graph<T>* graph_ = nullptr;
  std::size_t id_ = 0;
};

/// Tape of recorded operations.
///
/// Nodes are appended in execution order, which is a topological order of the
/// dataflow DAG. backward() walks the tape once in reverse and accumulates
/// gradient contributions additively into parents.
template <Real T>
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, std::size_t)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var<T> leaf(Tensor<T> value, bool requires_grad = true) {
    value.set_requires_grad(requires_grad);
    value.clear_grad();
    nodes_.push_back(Node{std::move(value), {}, nullptr, "leaf"});
    return Var<T>(this, nodes_.size() - 1);
  }

  Var<T> constant(Tensor<T> value) { return leaf(std::move(value), false); }

  /// Appends an op result. The backward rule is kept only when some parent
  /// carries gradient.
  Var<T> record(Tensor<T> value, std::vector<std::size_t> parents, BackwardFn backward,
                const char* op) {
    bool needs = false;
    for (auto p : parents) needs = needs || nodes_.at(p).value.requires_grad();
    value.set_requires_grad(needs);
    value.clear_grad();
    nodes_.push_back(Node{std::move(value), std::move(parents), needs ? std::move(backward) : nullptr,
                          op});
    return Var<T>(this, nodes_.size() - 1);
  }

  const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool needs_grad(std::size_t id) const { return nodes_.at(id).value.requires_grad(); }
  std::string_view op_name(std::size_t id) const { return nodes_.at(id).op; }
  std::span<const std::size_t> parents(std::size_t id) const { return nodes_.at(id).parents; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Gradient buffer of a node, allocated as zeros on first access.
  std::span<T> grad_of(std::size_t id) {
    auto& t = nodes_.at(id).value;
    if (!t.has_grad()) t.zero_grad();
    return t.grad();
  }

  void backward(Var<T> root) {
    if (root.valid() && &root.graph() != this) throw GraphError("backward root belongs to another graph");
    const auto& rv = value(root.id());
    if (rv.size() != 1) throw GraphError("backward requires a scalar root, got shape " + shape_str(rv.shape()));
    if (backward_done_) throw GraphError("backward called twice without reset_grad()");
    backward_done_ = true;
    if (!rv.requires_grad()) return;
    grad_of(root.id())[0] = T{1};
    for (std::size_t id = root.id() + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.backward || !n.value.has_grad()) continue;
      n.backward(*this, id);
    }
  }

  void reset_grad() {
    for (auto& n : nodes_) n.value.clear_grad();
    backward_done_ = false;
  }

 private:
  struct Node {
    Tensor<T> value;
    std::vector<std::size_t> parents;
    BackwardFn backward;
    const char* op;
  };

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

}  // namespace mixcpt
