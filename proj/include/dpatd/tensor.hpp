// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <new>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dpatd/errors.hpp"

namespace dpatd {

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

namespace detail {

/// Allocator handing out 64-byte aligned storage. Eigen picks vectorized
/// code paths and reduction orders from buffer addresses; aligned storage
/// keeps results independent of where the heap happens to place a tensor.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t alignment{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), alignment)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, alignment); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

}  // namespace detail

/// Tensor storage.
using Buffer = std::vector<double, detail::AlignedAllocator<double>>;

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

/// One recorded value in the computation graph. Non-leaf nodes own their
/// inputs and a backward closure that reads `grad` and accumulates into the
/// inputs' gradients.
struct Node {
  Shape shape;
  Buffer value;
  Buffer grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const { return !backward_fn; }

  double* grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    return grad.data();
  }

  Node() = default;
  Node(const Node&) = delete;
  Node& operator=(const Node&) = delete;

  // Long graphs would otherwise unwind through one destructor frame per
  // node. Nested releases are queued and drained by the outermost call.
  ~Node() {
    struct Pending {
      std::vector<std::shared_ptr<Node>> nodes;
      std::vector<std::function<void(Node&)>> closures;
      bool draining = false;
    };
    thread_local Pending pending;
    for (auto& n : inputs) pending.nodes.push_back(std::move(n));
    if (backward_fn) pending.closures.push_back(std::move(backward_fn));
    if (pending.draining) return;
    pending.draining = true;
    while (!pending.nodes.empty() || !pending.closures.empty()) {
      if (!pending.closures.empty()) {
        auto f = std::move(pending.closures.back());
        pending.closures.pop_back();
      } else {
        auto n = std::move(pending.nodes.back());
        pending.nodes.pop_back();
      }
    }
    pending.draining = false;
  }
};

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Dense row-major array of doubles. Copies share the underlying node, so a
/// Tensor behaves like a handle: values are immutable once produced by an op,
/// gradients accumulate in place.
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::initializer_list<double> data, bool requires_grad = false)
      : Tensor(std::move(shape), Buffer(data), requires_grad) {}

  Tensor(Shape shape, const std::vector<double>& data, bool requires_grad = false)
      : Tensor(std::move(shape), Buffer(data.begin(), data.end()), requires_grad) {}

  Tensor(Shape shape, Buffer data, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    if (numel_of(shape) != data.size()) {
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_str(shape));
    }
    for (auto d : shape) {
      if (d == 0) throw DimensionError("zero-sized dimension in " + shape_str(shape));
    }
    node_->shape = std::move(shape);
    node_->value = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = numel_of(shape);
    return Tensor(std::move(shape), Buffer(n, 0.0), requires_grad);
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    const auto n = numel_of(shape);
    return Tensor(std::move(shape), Buffer(n, value), requires_grad);
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return Tensor({1}, {value}, requires_grad);
  }

  static Tensor vector(std::initializer_list<double> values, bool requires_grad = false) {
    return Tensor({values.size()}, Buffer(values), requires_grad);
  }

  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows,
                       bool requires_grad = false) {
    Buffer data;
    std::size_t cols = rows.begin()->size();
    for (const auto& r : rows) {
      if (r.size() != cols) throw DimensionError("ragged matrix literal");
      data.insert(data.end(), r.begin(), r.end());
    }
    return Tensor({rows.size(), cols}, std::move(data), requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const double> data() const { return node_->value; }
  double at(std::size_t i) const { return node_->value.at(i); }
  double item() const {
    if (numel() != 1) throw RankError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }

  /// Raw write access for optimizers and initializers. Writes are not
  /// recorded on any tape.
  std::span<double> mutable_data() { return node_->value; }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    node_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  std::span<const double> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  /// Copy of the values with no graph history.
  Tensor detach() const { return Tensor(shape(), node_->value, false); }

  inline void backward() const;

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}
  friend Tensor make_op_result(Shape, Buffer, const char*,
                               std::vector<Tensor>, std::function<void(detail::Node&)>);

  std::shared_ptr<detail::Node> node_;
};

/// Builds an op output. The backward closure is kept only when gradient
/// recording is enabled and some input requires a gradient.
inline Tensor make_op_result(Shape shape, Buffer value, const char* op,
                             std::vector<Tensor> inputs,
                             std::function<void(detail::Node&)> backward_fn) {
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  bool any = false;
  for (const auto& t : inputs) any = any || t.requires_grad();
  if (any && detail::grad_mode()) {
    node->requires_grad = true;
    node->backward_fn = std::move(backward_fn);
    for (auto& t : inputs) node->inputs.push_back(t.node_ptr());
  }
  return Tensor(std::move(node));
}

/// Gradient buffer of `t` if it participates in differentiation, else null.
inline double* grad_sink(const Tensor& t) {
  return t.requires_grad() ? t.node()->grad_buffer() : nullptr;
}

/// Adds `g` into t's gradient, stealing the buffer when t has none yet.
/// `g` is left in an unspecified state.
inline void accumulate_grad(const Tensor& t, Buffer& g) {
  if (!t.requires_grad()) return;
  auto& dst = t.node()->grad;
  if (dst.size() != g.size()) {
    dst = std::move(g);
    return;
  }
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
}

/// Reverse topological ordering of the nodes reachable from a root.
class Tape {
 public:
  static Tape record(const Tensor& root) {
    Tape tape;
    std::unordered_set<const detail::Node*> seen;
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    stack.emplace_back(root.node(), 0);
    seen.insert(root.node());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->inputs.size()) {
        detail::Node* child = node->inputs[next++].get();
        if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
      } else {
        tape.order_.push_back(node);
        stack.pop_back();
      }
    }
    std::reverse(tape.order_.begin(), tape.order_.end());
    return tape;
  }

  std::size_t size() const { return order_.size(); }

  /// Seeds the root with d(root)/d(root) = 1 and runs every backward closure
  /// in order. Leaf gradients accumulate; intermediate gradients are reset
  /// before and released after.
  void replay() {
    if (order_.empty()) return;
    for (auto* n : order_) {
      if (!n->is_leaf()) n->grad.clear();
    }
    order_.front()->grad_buffer()[0] += 1.0;
    for (auto* n : order_) {
      if (!n->is_leaf() && !n->grad.empty()) {
        n->backward_fn(*n);
      }
    }
    for (auto* n : order_) {
      if (!n->is_leaf()) Buffer().swap(n->grad);
    }
  }

 private:
  std::vector<detail::Node*> order_;
};

inline void Tensor::backward() const {
  if (numel() != 1) {
    throw RankError("backward() needs a scalar, got shape " + shape_str(shape()));
  }
  if (!requires_grad()) return;
  Tape::record(*this).replay();
}

inline void backward(const Tensor& scalar) { scalar.backward(); }

}  // namespace dpatd
