// Copyright 2026 The sadq Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
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

namespace sadq {

using Shape = std::vector<std::size_t>;

/// Raised when operand shapes are incompatible.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised for invalid hyperparameters or configuration values.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised for misuse of the differentiation tape.
class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Raised when an on-disk artifact is malformed or does not match expectations.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when a computation produces non-finite values.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ')';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  bool consumed = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  bool is_leaf() const { return !backward; }

  std::vector<double>& ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Dense row-major float64 array with an optional gradient slot.
///
/// Copies share storage; use clone() for a deep copy. Operations on tensors that
/// require gradients record a backward rule, and backward() on a scalar result
/// accumulates d(result)/d(leaf) into every participating leaf.
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> values) : node_(std::make_shared<detail::Node>()) {
    if (shape_numel(shape) != values.size()) {
      throw ShapeError("tensor data length " + std::to_string(values.size()) +
                       " does not match shape " + shape_str(shape));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(values);
  }

  static Tensor zeros(Shape shape) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0));
  }
  static Tensor full(Shape shape, double value) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value));
  }
  static Tensor ones(Shape shape) { return full(std::move(shape), 1.0); }
  static Tensor scalar(double v) { return Tensor({}, {v}); }
  static Tensor vector(std::vector<double> v) {
    const auto n = v.size();
    return Tensor({n}, std::move(v));
  }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
    return Tensor({rows, cols}, std::move(v));
  }
  static Tensor identity(std::size_t n) {
    auto t = zeros({n, n});
    for (std::size_t i = 0; i < n; ++i) t.data()[i * n + i] = 1.0;
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }
  std::size_t dim(std::size_t axis) const {
    if (axis >= rank()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
    return node_->shape[axis];
  }
  std::size_t rows() const { return rank() == 2 ? node_->shape[0] : (rank() == 1 ? 1 : 0); }
  std::size_t cols() const { return rank() == 2 ? node_->shape[1] : (rank() == 1 ? node_->shape[0] : 0); }

  std::span<const double> data() const { return node_->data; }
  std::span<double> data() { return node_->data; }
  const std::vector<double>& values() const { return node_->data; }

  double item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }
  double at(std::size_t i) const { return node_->data.at(i); }
  double at(std::size_t r, std::size_t c) const { return node_->data.at(r * cols() + c); }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on = true) {
    if (!node_->is_leaf()) throw GraphError("requires_grad can only be toggled on leaf tensors");
    node_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return node_->grad.size() == node_->data.size() && !node_->data.empty(); }
  std::span<const double> grad() const {
    if (!has_grad()) throw GraphError("tensor has no gradient; run backward first");
    return node_->grad;
  }
  std::span<double> grad_mut() { return node_->ensure_grad(); }
  void zero_grad() { node_->grad.clear(); }

  /// A new leaf sharing no graph with this tensor.
  Tensor detach() const { return Tensor(shape(), node_->data); }
  Tensor clone() const { return detach(); }

  Tensor reshaped(Shape new_shape) const;

  const char* op_name() const { return node_->op; }

  std::shared_ptr<detail::Node> node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

namespace detail {

/// Builds an op result, recording a backward rule when any input needs gradients.
template <class Backward>
Tensor make_result(Shape shape, std::vector<double> values, std::initializer_list<const Tensor*> inputs,
                   const char* op, Backward&& backward) {
  Tensor out(std::move(shape), std::move(values));
  if (!grad_mode_flag()) return out;
  bool any = false;
  for (const Tensor* t : inputs) any = any || t->requires_grad();
  if (!any) return out;
  auto node = out.node();
  node->requires_grad = true;
  node->op = op;
  for (const Tensor* t : inputs) node->parents.push_back(t->node());
  node->backward = std::forward<Backward>(backward);
  return out;
}

/// Gradient buffer of a parent, or nullptr when that parent does not need one.
inline double* parent_grad(Node& self, std::size_t i) {
  auto& p = *self.parents[i];
  if (!p.requires_grad) return nullptr;
  return p.ensure_grad().data();
}

}  // namespace detail

inline Tensor Tensor::reshaped(Shape new_shape) const {
  if (shape_numel(new_shape) != numel()) {
    throw ShapeError("cannot reshape " + shape_str(shape()) + " to " + shape_str(new_shape));
  }
  const std::size_t n = numel();
  return detail::make_result(std::move(new_shape), node_->data, {this}, "reshape", [n](detail::Node& self) {
    if (double* g = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i];
  });
}

/// Reverse-mode sweep from a scalar loss. The recorded graph is released afterwards,
/// so a second call without re-running the forward pass is an error.
inline void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw GraphError("backward requires a scalar loss, got shape " +
                     (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  auto root = loss.node();
  if (root->consumed) throw GraphError("backward called twice on the same graph; re-run the forward pass");
  if (!root->requires_grad) throw GraphError("loss is detached: no recorded operation requires a gradient");
  if (root->is_leaf()) throw GraphError("loss is a leaf tensor; nothing to differentiate");

  // Iterative post-order DFS gives a topological order (parents before children).
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> visited;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{root.get(), 0}};
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* p = node->parents[next++].get();
      if (p->requires_grad && !visited.count(p)) {
        if (p->consumed) throw GraphError("graph segment was already consumed by an earlier backward pass");
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->ensure_grad();
  root->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->is_leaf()) continue;
    n->ensure_grad();
    n->backward(*n);
  }
  for (detail::Node* n : order) {
    if (n->is_leaf()) continue;
    n->backward = nullptr;
    n->parents.clear();
    n->grad.clear();
    n->grad.shrink_to_fit();
    n->consumed = true;
  }
}

inline bool all_finite(std::span<const double> xs) {
  for (double x : xs)
    if (!std::isfinite(x)) return false;
  return true;
}

}  // namespace sadq
