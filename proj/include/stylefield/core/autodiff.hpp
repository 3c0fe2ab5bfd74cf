#pragma once

// Tape-free reverse-mode autodiff. Every differentiable value is a Var that
// owns a Node; an op's Node keeps shared ownership of its inputs, so the graph
// lives exactly as long as the output that was produced from it.

#include <algorithm>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "stylefield/core/tensor.hpp"

namespace stylefield::ad {

namespace detail {
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline bool grad_enabled() { return detail::grad_mode(); }

template <class S>
struct Node {
  Tensor<S> value;
  std::vector<S> grad;  // empty until something flows into it
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  std::vector<S>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), S(0));
    return grad;
  }
};

template <class S>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<S> value, bool requires_grad = false)
      : node_(std::make_shared<Node<S>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(std::shared_ptr<Node<S>> n) : node_(std::move(n)) {}

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor<S>& value() const { return node_->value; }
  Tensor<S>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape; }
  std::size_t size() const { return node_->value.size(); }
  int dim(std::size_t i) const { return node_->value.dim(i); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const std::vector<S>& grad() const { return node_->grad; }
  std::vector<S>& grad_buffer() const { return node_->grad_buffer(); }
  void zero_grad() const { node_->grad.clear(); }
  S item() const { return node_->value.data.at(0); }
  const std::shared_ptr<Node<S>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<S>> node_;
};

template <class S>
Var<S> constant(Tensor<S> t) {
  return Var<S>(std::move(t), false);
}

template <class S>
Var<S> parameter(Tensor<S> t) {
  return Var<S>(std::move(t), true);
}

/// Builds an op output. `backward` receives the output node (whose grad is
/// populated) and must push gradients into the inputs it captured.
template <class S, class Fn>
Var<S> make_op(Tensor<S> out, std::initializer_list<Var<S>> inputs, Fn&& backward) {
  auto node = std::make_shared<Node<S>>();
  node->value = std::move(out);
  if (grad_enabled()) {
    for (const auto& in : inputs) {
      if (in.requires_grad()) {
        node->requires_grad = true;
        break;
      }
    }
    if (node->requires_grad) {
      for (const auto& in : inputs)
        if (in.requires_grad()) node->parents.push_back(in.node());
      node->backward_fn = std::forward<Fn>(backward);
    }
  }
  return Var<S>(std::move(node));
}

/// Same as make_op for a runtime-sized list of inputs.
template <class S, class Fn>
Var<S> make_op_n(Tensor<S> out, const std::vector<Var<S>>& inputs, Fn&& backward) {
  auto node = std::make_shared<Node<S>>();
  node->value = std::move(out);
  if (grad_enabled()) {
    for (const auto& in : inputs)
      if (in.requires_grad()) {
        node->requires_grad = true;
        node->parents.push_back(in.node());
      }
    if (node->requires_grad) node->backward_fn = std::forward<Fn>(backward);
  }
  return Var<S>(std::move(node));
}

/// Back-propagates from a scalar root. Gradients accumulate into every
/// reachable node that requires them; call zero_grad on leaves between steps.
template <class S>
void backward(const Var<S>& root, S seed = S(1)) {
  if (!root.requires_grad()) return;
  std::vector<Node<S>*> order;
  std::unordered_set<Node<S>*> seen;
  // iterative post-order DFS
  std::vector<std::pair<Node<S>*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx < n->parents.size()) {
      Node<S>* p = n->parents[idx++].get();
      if (seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  auto& g = root.node()->grad_buffer();
  std::fill(g.begin(), g.end(), seed);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<S>* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
    // Interior gradients are no longer needed once pushed to parents.
    if (n->backward_fn) {
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }
}

}  // namespace stylefield::ad
