#pragma once

// Dense tensor with a reverse-mode gradient tape.
//
// A tensor is a cheap handle onto a shared node. Ops that receive at least
// one grad-requiring input (while grad mode is on) record their inputs and a
// backward rule on the output node; the graph is released together with the
// last handle that references it.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "sbnn/errors.hpp"

namespace sbnn {

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

namespace detail {
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Disables tape recording for its lifetime (inference, frozen teachers).
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a backward pass reaches this node
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;
  const char* op = "leaf";

  /// Grad buffer of parent `i`, or nullptr when that parent takes no gradient.
  T* parent_grad(std::size_t i) {
    auto& p = parents[i];
    return p->requires_grad ? p->grad.data() : nullptr;
  }
};

template <typename T>
class BasicTensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<Node<T>>;

  BasicTensor() : node_(std::make_shared<Node<T>>()) {}
  explicit BasicTensor(NodePtr n) : node_(std::move(n)) {}

  BasicTensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    if (numel_of(shape) != data.size())
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_str(shape));
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static BasicTensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<T> d(numel_of(shape), T(0));
    return BasicTensor(std::move(shape), std::move(d), requires_grad);
  }
  static BasicTensor full(Shape shape, T value, bool requires_grad = false) {
    std::vector<T> d(numel_of(shape), value);
    return BasicTensor(std::move(shape), std::move(d), requires_grad);
  }
  static BasicTensor scalar(T v, bool requires_grad = false) {
    return BasicTensor(Shape{1}, std::vector<T>{v}, requires_grad);
  }
  static BasicTensor from(std::initializer_list<T> values, Shape shape = {}) {
    std::vector<T> d(values);
    if (shape.empty()) shape = {d.size()};
    return BasicTensor(std::move(shape), std::move(d));
  }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const {
    if (i >= rank()) throw DimensionError("dim index out of range for " + shape_str(shape()));
    return node_->shape[i];
  }
  std::size_t numel() const { return node_->data.size(); }

  std::span<T> data() { return node_->data; }
  std::span<const T> data() const { return node_->data; }
  std::vector<T>& storage() { return node_->data; }
  const std::vector<T>& storage() const { return node_->data; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<T> grad() { return node_->grad; }
  std::span<const T> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.assign(numel(), T(0)); }
  void clear_grad() { node_->grad.clear(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) {
    if (!node_->parents.empty())
      throw ConfigError("requires_grad can only be toggled on leaf tensors");
    node_->requires_grad = v;
  }
  bool is_leaf() const { return node_->parents.empty(); }
  const char* op() const { return node_->op; }

  T item() const {
    if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }
  T operator[](std::size_t i) const { return node_->data[i]; }
  T& operator[](std::size_t i) { return node_->data[i]; }

  /// New leaf sharing no tape history; data is copied.
  BasicTensor detach() const { return BasicTensor(shape(), node_->data, false); }
  BasicTensor clone() const { return BasicTensor(shape(), node_->data, requires_grad() && is_leaf()); }

  bool same_node(const BasicTensor& o) const { return node_ == o.node_; }
  const NodePtr& node() const { return node_; }

  /// Back-propagates from a single-element tensor. Leaf gradients accumulate;
  /// every reachable grad-requiring tensor ends with a (possibly zero) grad.
  void backward() const {
    if (numel() != 1)
      throw DimensionError("backward() requires a scalar, got " + shape_str(shape()));
    if (!node_->requires_grad) return;

    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, next] = stack.back();
      if (next < n->parents.size()) {
        Node<T>* p = n->parents[next++].get();
        if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
    for (Node<T>* n : order) {
      if (n->parents.empty()) {
        if (n->grad.size() != n->data.size()) n->grad.assign(n->data.size(), T(0));
      } else {
        n->grad.assign(n->data.size(), T(0));
      }
    }
    node_->grad[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      if ((*it)->backward_fn) (*it)->backward_fn(**it);
    }
  }

 private:
  NodePtr node_;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

/// Builds an op output. The backward rule and parents are recorded only when
/// grad mode is on and some input requires a gradient.
template <typename T>
BasicTensor<T> make_result(Shape shape, std::vector<T> data,
                           std::initializer_list<BasicTensor<T>> inputs, const char* op,
                           std::function<void(Node<T>&)> backward) {
  BasicTensor<T> out(std::move(shape), std::move(data));
  bool track = false;
  if (grad_enabled())
    for (const auto& in : inputs) track = track || in.requires_grad();
  if (track) {
    auto& n = *out.node();
    n.requires_grad = true;
    n.op = op;
    for (const auto& in : inputs) n.parents.push_back(in.node());
    n.backward_fn = std::move(backward);
  }
  return out;
}

template <typename T>
void require_same_shape(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

template <typename To, typename From>
BasicTensor<To> cast(const BasicTensor<From>& t) {
  std::vector<To> d(t.data().begin(), t.data().end());
  return BasicTensor<To>(t.shape(), std::move(d));
}

}  // namespace sbnn
