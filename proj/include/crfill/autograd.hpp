#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "crfill/tensor.hpp"

namespace crfill {

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // allocated on first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this->grad and accumulates into inputs that require grad.
  std::function<void(Node&)> backward_fn;

  Tensor<T>& grad_buffer() {
    if (grad.size() != value.size() || grad.shape() != value.shape()) grad = Tensor<T>(value.shape());
    return grad;
  }
  bool input_needs_grad(std::size_t i) const { return inputs[i] && inputs[i]->requires_grad; }
};

/// Handle to a value in the computation graph. Copies share the same node.
template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Var parameter(Tensor<T> value) { return Var(std::move(value), true); }

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  int dim(int i) const { return node_->value.dim(i); }
  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool r) { node_->requires_grad = r; }

  /// Gradient accumulated by backward(); zeros if none reached this node.
  const Tensor<T>& grad() const { return node_->grad_buffer(); }
  Tensor<T>& mutable_grad() { return node_->grad_buffer(); }
  void zero_grad() {
    if (!node_->grad.empty()) node_->grad.fill(T(0));
  }

  const std::shared_ptr<Node<T>>& node() const noexcept { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

namespace detail {
inline thread_local bool grad_enabled = true;
}

inline bool grad_mode_enabled() noexcept { return detail::grad_enabled; }

/// Disables graph recording for the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Wraps an op result. The backward closure is kept only if some input needs a gradient.
template <typename T>
Var<T> make_result(Tensor<T> value, std::vector<Var<T>> inputs, std::function<void(Node<T>&)> backward_fn) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  if (!grad_mode_enabled()) return Var<T>(std::move(node));
  bool any = false;
  for (const auto& in : inputs) any = any || (in.defined() && in.requires_grad());
  if (!any) return Var<T>(std::move(node));
  node->requires_grad = true;
  node->inputs.reserve(inputs.size());
  for (auto& in : inputs) node->inputs.push_back(in.defined() ? in.node() : nullptr);
  node->backward_fn = std::move(backward_fn);
  return Var<T>(std::move(node));
}

/// Reverse-mode sweep from a scalar root. Leaf gradients accumulate across calls.
template <typename T>
void backward(const Var<T>& root, T seed = T(1)) {
  if (!root.defined() || !root.requires_grad()) return;
  if (root.value().size() != 1) throw DimensionError("backward: root must be a scalar");

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> marked;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  marked.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->inputs.size()) {
      Node<T>* child = node->inputs[idx++].get();
      if (child && child->requires_grad && marked.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->grad_buffer().fill(T(0));
  root.node()->grad[0] = seed;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
  // Interior gradients are not needed after the sweep.
  for (Node<T>* n : order) {
    if (n->backward_fn) n->grad = Tensor<T>();
  }
}

}  // namespace crfill
