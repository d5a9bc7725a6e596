#pragma once

// Dense row-major tensors with reverse-mode differentiation.
//
// A Tensor is a cheap handle onto a shared node. Results of primitives keep
// references to their inputs while gradient recording is active, which forms
// the tape that backward() walks. Handles are not thread-safe; a tape belongs
// to the thread that built it.

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "robomamba/error.hpp"

namespace robomamba {

using Shape = std::vector<std::size_t>;

std::size_t numel_of(const Shape& shape);
std::string shape_string(const Shape& shape);

// The closed set of differentiable operations. Model code composes from
// these; each one has a hand-written backward that is finite-difference
// checked in the test suite.
enum class Primitive {
  leaf,
  matmul,
  add,
  mul,
  silu,
  softplus,
  exp,
  log,
  mean_pool,
  max_pool,
  layer_norm,
  conv1d_depthwise,
  softmax_rows,
  concat,
  slice,
  reshape,
  transpose,
  acos,
  selective_scan,
};

const char* primitive_name(Primitive kind);

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until something flows into it
  bool requires_grad = false;
  Primitive op = Primitive::leaf;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  bool is_leaf() const { return op == Primitive::leaf; }

  std::span<T> ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

namespace detail {
bool& grad_mode_flag();
}

inline bool grad_enabled() { return detail::grad_mode_flag(); }

// Disables tape recording in the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    if (numel_of(shape) != values.size()) {
      throw ShapeError("tensor of shape " + shape_string(shape) + " needs " +
                       std::to_string(numel_of(shape)) + " values, got " +
                       std::to_string(values.size()));
    }
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = numel_of(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }

  static Tensor full(Shape shape, T fill) {
    const auto n = numel_of(shape);
    return Tensor(std::move(shape), std::vector<T>(n, fill));
  }

  static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

  static Tensor from_node(std::shared_ptr<Node<T>> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

  bool defined() const { return static_cast<bool>(node_); }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const T> data() const { return node_->value; }
  // In-place access for initialisation and optimizer updates on leaves.
  std::span<T> mutable_data() const { return node_->value; }

  T item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape()));
    return node_->value[0];
  }
  T operator[](std::size_t i) const { return node_->value[i]; }
  T at(std::size_t row, std::size_t col) const {
    return node_->value[row * node_->shape.back() + col];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) const { node_->requires_grad = on; }
  bool is_leaf() const { return node_->is_leaf(); }
  Primitive op() const { return node_->op; }

  // Accumulated gradient; reads as zeros when nothing reached this tensor.
  std::span<const T> grad() const { return node_->ensure_grad(); }
  std::span<T> mutable_grad() const { return node_->ensure_grad(); }
  bool has_grad() const { return !node_->grad.empty(); }
  void zero_grad() const { node_->grad.clear(); }

  // Fresh leaf holding a copy of the values.
  Tensor detach() const { return Tensor(shape(), node_->value); }
  Tensor clone_leaf() const { return Tensor(shape(), node_->value, requires_grad()); }

  const void* id() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

namespace detail {

// Creates the output of a primitive and, when recording, links it into the
// tape. Rejects non-finite results.
template <typename T>
Tensor<T> record(Primitive op, Shape shape, std::vector<T> value,
                 std::vector<Tensor<T>> inputs, std::function<void(Node<T>&)> backward) {
  for (const T v : value) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(primitive_name(op)) + ": produced a non-finite value");
    }
  }
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  bool track = false;
  if (grad_enabled()) {
    for (const auto& in : inputs) track = track || in.requires_grad();
  }
  if (track) {
    node->requires_grad = true;
    node->parents.reserve(inputs.size());
    for (auto& in : inputs) node->parents.push_back(in.node());
    node->backward = std::move(backward);
  }
  return Tensor<T>::from_node(std::move(node));
}

}  // namespace detail

// Propagates d(root)/d(x) to every recorded ancestor and accumulates it into
// leaves that require gradients. The tape below root is released afterwards.
// Returns the leaves that received a gradient.
template <typename T>
std::vector<Tensor<T>> backward(const Tensor<T>& root);

extern template std::vector<Tensor<float>> backward(const Tensor<float>&);
extern template std::vector<Tensor<double>> backward(const Tensor<double>&);

}  // namespace robomamba
