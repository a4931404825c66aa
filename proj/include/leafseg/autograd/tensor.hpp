#pragma once

// Reverse-mode automatic differentiation over dense row-major tensors.
//
// A Var is a shared handle to a graph node holding a value buffer, an
// optional gradient buffer and the closure that pushes the node's gradient
// into its parents. Ops record a node only when gradient recording is enabled
// and at least one input requires a gradient.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace leafseg::ag {

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::int64_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ']';
  return os.str();
}

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline void check(bool cond, const std::string& what) {
  if (!cond) throw ShapeError(what);
}

namespace detail {
inline thread_local bool grad_enabled = true;
}

inline bool grad_enabled() { return detail::grad_enabled; }

/// Disables graph recording for its lifetime (inference, optimizer updates).
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  std::vector<T>& ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad;
  }
};

template <typename T>
class Var {
 public:
  using value_type = T;

  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Var from(Shape shape, std::vector<T> value, bool requires_grad = false) {
    check(numel(shape) == static_cast<std::int64_t>(value.size()),
          "Var::from: value size " + std::to_string(value.size()) + " does not match shape " +
              shape_str(shape));
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return Var(std::move(n));
  }

  static Var zeros(Shape shape, bool requires_grad = false) {
    auto count = static_cast<std::size_t>(numel(shape));
    return from(std::move(shape), std::vector<T>(count, T(0)), requires_grad);
  }

  static Var full(Shape shape, T v, bool requires_grad = false) {
    auto count = static_cast<std::size_t>(numel(shape));
    return from(std::move(shape), std::vector<T>(count, v), requires_grad);
  }

  static Var scalar(T v, bool requires_grad = false) { return from({}, {v}, requires_grad); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::int64_t rank() const { return static_cast<std::int64_t>(node_->shape.size()); }
  std::int64_t dim(std::int64_t i) const {
    if (i < 0) i += rank();
    return node_->shape.at(static_cast<std::size_t>(i));
  }
  std::int64_t size() const { return static_cast<std::int64_t>(node_->value.size()); }

  std::span<const T> data() const { return node_->value; }
  std::span<T> mutable_data() { return node_->value; }
  std::vector<T>& values() { return node_->value; }
  const std::vector<T>& values() const { return node_->value; }
  std::span<const T> grad() const { return node_->grad; }
  std::vector<T>& grad_buffer() { return node_->ensure_grad(); }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  void zero_grad() { node_->grad.clear(); }

  T item() const {
    check(node_->value.size() == 1, "item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }

  T at(std::int64_t flat) const { return node_->value.at(static_cast<std::size_t>(flat)); }

  /// Copy of the value with no history.
  Var detach() const { return from(shape(), node_->value, false); }

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

  /// Backpropagates from this node. The seed gradient defaults to ones, which
  /// for a scalar loss is dL/dL = 1. Intermediate graph edges are released
  /// afterwards; leaf gradients accumulate across calls until zero_grad().
  void backward() {
    check(node_->requires_grad, "backward() on a tensor that does not require grad");
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, next] = stack.back();
      if (next < n->parents.size()) {
        Node<T>* p = n->parents[next++].get();
        if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
    auto& g = node_->ensure_grad();
    std::fill(g.begin(), g.end(), T(1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node<T>* n = *it;
      if (n->backward_fn && n->grad.size() == n->value.size()) n->backward_fn(*n);
    }
    for (Node<T>* n : order) {
      if (n->backward_fn) {
        n->backward_fn = nullptr;
        n->parents.clear();
        if (n != node_.get()) n->grad.clear();
      }
    }
  }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Builds an op result. `backward` has signature void(Node<T>& out) and must
/// accumulate into the gradient buffers of the inputs that require grad.
template <typename T, typename F>
Var<T> make_result(Shape shape, std::vector<T> value, std::initializer_list<Var<T>> inputs,
                   F&& backward) {
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  if (grad_enabled()) {
    bool any = false;
    for (const auto& in : inputs) any = any || (in.defined() && in.requires_grad());
    if (any) {
      n->requires_grad = true;
      for (const auto& in : inputs)
        if (in.defined()) n->parents.push_back(in.node_ptr());
      n->backward_fn = std::forward<F>(backward);
    }
  }
  return Var<T>(std::move(n));
}

template <typename T, typename F>
Var<T> make_result(Shape shape, std::vector<T> value, const std::vector<Var<T>>& inputs,
                   F&& backward) {
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  if (grad_enabled()) {
    bool any = false;
    for (const auto& in : inputs) any = any || (in.defined() && in.requires_grad());
    if (any) {
      n->requires_grad = true;
      for (const auto& in : inputs)
        if (in.defined()) n->parents.push_back(in.node_ptr());
      n->backward_fn = std::forward<F>(backward);
    }
  }
  return Var<T>(std::move(n));
}

/// Gradient buffer of an input if it participates in backprop, else nullptr.
template <typename T>
std::vector<T>* grad_of(const Var<T>& v) {
  if (!v.defined() || !v.requires_grad()) return nullptr;
  return &v.node()->ensure_grad();
}

}  // namespace leafseg::ag
