// Copyright 2026 The hidden-transfer Authors
// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
// http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "htd/numerics/error.hpp"

namespace htd {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

std::string shape_string(const Shape& shape);

template <typename T>
class Tensor;

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  // Shared so that parameter views can alias one buffer with separate grads.
  std::shared_ptr<std::vector<T>> data;
  std::vector<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad, accumulates into parents' grads.
  std::function<void(Node&)> backward;

  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(data->size(), T(0));
    return grad;
  }
};

}  // namespace detail

/// Dense row-major tensor handle with optional gradient tracking.
///
/// Copies share the underlying node. Operations on inputs that require
/// gradients record a backward closure; everything else runs tape-free, so
/// frozen weights never accumulate gradient state.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, bool requires_grad = false)
      : node_(std::make_shared<detail::Node<T>>()) {
    node_->data = std::make_shared<std::vector<T>>(shape_numel(shape), T(0));
    node_->shape = std::move(shape);
    node_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
      : node_(std::make_shared<detail::Node<T>>()) {
    if (shape_numel(shape) != values.size()) {
      throw ShapeError("tensor data length " + std::to_string(values.size()) +
                       " does not match shape " + shape_string(shape));
    }
    node_->data = std::make_shared<std::vector<T>>(std::move(values));
    node_->shape = std::move(shape);
    node_->requires_grad = requires_grad;
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<T> values,
                       bool requires_grad = false) {
    return Tensor({rows, cols}, std::move(values), requires_grad);
  }

  static Tensor scalar(T value) { return Tensor(Shape{}, std::vector<T>{value}); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data->size(); }
  std::size_t rows() const { return rank() >= 2 ? node_->shape[0] : 1; }
  std::size_t cols() const { return rank() == 0 ? 1 : node_->shape.back(); }

  std::span<const T> values() const { return *node_->data; }
  std::span<T> mutable_values() { return *node_->data; }
  std::span<const T> row(std::size_t r) const { return values().subspan(r * cols(), cols()); }
  T item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape()));
    return (*node_->data)[0];
  }
  T at(std::size_t r, std::size_t c) const { return (*node_->data)[r * cols() + c]; }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  /// Only meaningful on leaves (parameters).
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool is_leaf() const { return !node_->backward; }
  bool has_grad() const { return node_ && !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad.clear(); }

  /// Same storage, no history, no gradient.
  Tensor detach() const {
    Tensor out;
    out.node_ = std::make_shared<detail::Node<T>>();
    out.node_->shape = node_->shape;
    out.node_->data = node_->data;
    return out;
  }

  /// New leaf aliasing this storage with its own gradient buffer.
  Tensor alias_leaf(bool requires_grad) const {
    Tensor out = detach();
    out.node_->requires_grad = requires_grad;
    return out;
  }

  /// Deep copy of values into a fresh leaf.
  Tensor clone(bool requires_grad = false) const {
    return Tensor(shape(), std::vector<T>(values().begin(), values().end()), requires_grad);
  }

  const std::shared_ptr<detail::Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node<T>> node_;
};

namespace detail {

template <typename T>
void check_finite(std::span<const T> values, const char* op) {
  for (T v : values) {
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite value produced by ") + op);
  }
}

/// Wraps an op result; records history only if some input requires grad.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> values, const char* op,
                      std::initializer_list<const Tensor<T>*> inputs,
                      std::function<void(Node<T>&)> backward) {
  check_finite<T>(values, op);
  Tensor<T> out(std::move(shape), std::move(values));
  bool any = false;
  for (const Tensor<T>* in : inputs) any = any || in->requires_grad();
  if (any) {
    auto& node = *out.node();
    node.requires_grad = true;
    for (const Tensor<T>* in : inputs) node.parents.push_back(in->node());
    node.backward = std::move(backward);
  }
  return out;
}

}  // namespace detail

/// Reverse-mode sweep from a scalar loss. Leaf tensors that require grad
/// accumulate into their grad buffers; intermediate buffers are released.
template <typename T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined() || !loss.requires_grad()) {
    throw UsageError("backward() on a value with no recorded history");
  }
  if (loss.numel() != 1) throw ShapeError("backward() needs a scalar loss");

  using NodePtr = std::shared_ptr<detail::Node<T>>;
  std::vector<NodePtr> order;
  std::unordered_set<const detail::Node<T>*> seen;
  std::vector<std::pair<NodePtr, std::size_t>> stack{{loss.node(), 0}};
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      NodePtr parent = node->parents[next++];
      if (parent->requires_grad && seen.insert(parent.get()).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node()->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node<T>& node = **it;
    if (!node.backward) continue;
    if (!node.grad.empty()) node.backward(node);
    node.grad.clear();
    node.grad.shrink_to_fit();
    node.backward = nullptr;
    node.parents.clear();
  }
}

}  // namespace htd
