#pragma once

// Minimal reverse-mode differentiation over Tensor values. Every op evaluates
// eagerly; when any input requires a gradient (and recording is enabled on the
// calling thread) the result keeps its parents and a backward closure.

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mkst/tensor.hpp"

namespace mkst {

namespace detail {
inline bool& grad_recording() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

/// Disables graph recording on the current thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_recording()) { detail::grad_recording() = false; }
  ~NoGradGuard() { detail::grad_recording() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool has_grad = false;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  Tensor<T>& grad_buffer() {
    if (!has_grad) {
      grad = Tensor<T>(value.shape());
      has_grad = true;
    }
    return grad;
  }

  void accumulate(const Tensor<T>& g) {
    if (!requires_grad) return;
    if (!has_grad) {
      grad = g;
      has_grad = true;
    } else {
      grad += g;
    }
  }
};

template <typename T>
class Var {
 public:
  using NodePtr = std::shared_ptr<Node<T>>;

  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(NodePtr node) : node_(std::move(node)) {}

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t dim(std::size_t axis) const { return node_->value.dim(axis); }
  bool requires_grad() const { return node_ && node_->requires_grad; }

  bool has_grad() const { return node_->has_grad; }
  const Tensor<T>& grad() const { return node_->grad_buffer(); }
  Tensor<T>& grad() { return node_->grad_buffer(); }
  void zero_grad() {
    node_->has_grad = false;
    node_->grad = Tensor<T>();
  }

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

/// Builds an op result. `backward` receives the result node; its grad is set
/// and parents are in the order given.
template <typename T>
Var<T> make_result(Tensor<T> value, std::vector<Var<T>> inputs, std::function<void(Node<T>&)> backward) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  bool needs = false;
  if (detail::grad_recording()) {
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    node->parents.reserve(inputs.size());
    for (auto& in : inputs) node->parents.push_back(in.node());
    node->backward = std::move(backward);
  }
  return Var<T>(std::move(node));
}

/// Reverse sweep from a scalar (or seeded) root. Leaf grads accumulate.
template <typename T>
void backward(const Var<T>& root, const Tensor<T>* seed = nullptr) {
  if (!root.requires_grad()) return;
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* parent = node->parents[next++].get();
      if (parent->requires_grad && !visited.count(parent)) {
        visited.insert(parent);
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  Node<T>* r = root.node().get();
  if (seed) {
    r->accumulate(*seed);
  } else {
    if (r->value.size() != 1) throw ShapeError("backward without seed requires a scalar root");
    Tensor<T> one(r->value.shape(), T{1});
    r->accumulate(one);
  }
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward && n->has_grad) n->backward(*n);
  }
}

}  // namespace mkst
