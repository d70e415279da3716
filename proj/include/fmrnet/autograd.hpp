#pragma once

// Minimal tape-free reverse-mode autodiff: every Var owns a node that keeps
// shared references to its parents, so the graph lives exactly as long as the
// outputs that depend on it.

#include <functional>
#include <memory>
#include <stdexcept>
#include <unordered_set>
#include <utility>
#include <vector>

#include "fmrnet/tensor.hpp"

namespace fmrnet {

namespace detail {
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

// Disables graph construction for the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  Tensor<T>& grad_buffer() {
    if (grad.shape() != value.shape()) grad = Tensor<T>(value.shape());
    return grad;
  }
};

template <class T>
class Var {
 public:
  using NodePtr = std::shared_ptr<Node<T>>;

  Var() = default;
  explicit Var(NodePtr node) : node_(std::move(node)) {}

  static Var constant(Tensor<T> value) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    return Var(std::move(n));
  }

  static Var leaf(Tensor<T> value, bool requires_grad = true) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return Var(std::move(n));
  }

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Tensor<T>& grad() const { return node_->grad; }
  Tensor<T>& mutable_grad() { return node_->grad_buffer(); }
  bool has_grad() const { return node_->grad.shape() == node_->value.shape() && !node_->grad.empty(); }
  void zero_grad() {
    if (!node_->grad.empty()) node_->grad.fill(T(0));
  }
  const Shape& shape() const { return node_->value.shape(); }
  int dim(int i) const { return node_->value.dim(i); }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  T item() const { return node_->value.item(); }
  const NodePtr& node() const noexcept { return node_; }

  Var detach() const { return constant(node_->value); }

  // Seeds d(self)/d(self) = 1 and propagates to every reachable leaf. The
  // intermediate graph is released afterwards.
  void backward() {
    if (node_->value.size() != 1) throw std::logic_error("backward() requires a scalar output");
    if (!node_->requires_grad) return;
    // owning pointers, since parents are released during the sweep
    std::vector<NodePtr> order;
    std::unordered_set<Node<T>*> seen{node_.get()};
    std::vector<std::pair<NodePtr, std::size_t>> stack{{node_, 0}};
    while (!stack.empty()) {
      NodePtr n = stack.back().first;
      const std::size_t idx = stack.back().second;
      if (idx < n->parents.size()) {
        ++stack.back().second;
        const NodePtr& p = n->parents[idx];
        if (p->requires_grad && seen.insert(p.get()).second) stack.emplace_back(p, 0);
      } else {
        order.push_back(std::move(n));
        stack.pop_back();
      }
    }
    node_->grad_buffer().fill(T(0));
    node_->grad[0] = T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node<T>* n = it->get();
      if (n->backward_fn) {
        n->backward_fn(*n);
        n->backward_fn = nullptr;
        n->parents.clear();
        n->grad = Tensor<T>();
      }
    }
  }

 private:
  NodePtr node_;
};

// Builds an op result. The backward closure is attached only when gradients
// are enabled and at least one input requires them.
template <class T>
Var<T> make_result(Tensor<T> value, std::vector<Var<T>> inputs, std::function<void(Node<T>&)> backward_fn) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  if (grad_enabled()) {
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (any) {
      n->requires_grad = true;
      n->parents.reserve(inputs.size());
      for (auto& in : inputs) n->parents.push_back(in.node());
      n->backward_fn = std::move(backward_fn);
    }
  }
  return Var<T>(std::move(n));
}

// Parent accessor for backward closures.
template <class T>
inline Node<T>& parent(Node<T>& n, std::size_t i) {
  return *n.parents[i];
}

}  // namespace fmrnet
