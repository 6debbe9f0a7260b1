#pragma once

// Dense NCHW tensor with reverse-mode automatic differentiation.
//
// A Tensor is a cheap handle to a shared node. Every differentiable op that
// sees at least one input with requires_grad() records its output node with a
// monotonically increasing recording index and a closure that pushes the
// output gradient into its inputs. backward() gathers the reachable recorded
// nodes into a Tape ordered by that index and replays it in reverse.
//
// Values are never modified after an op produced them. Leaves (parameters)
// are the exception: the optimizer updates them in place between steps.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "manet/errors.hpp"

namespace manet {

struct Shape {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;

  std::size_t numel() const {
    return static_cast<std::size_t>(n) * static_cast<std::size_t>(c) *
           static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
  }
  std::size_t plane() const {
    return static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
  }
  bool operator==(const Shape&) const = default;
  std::string str() const;
};

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until the first accumulation
  bool requires_grad = false;
  std::uint64_t order = 0;  // recording index, 0 for leaves
  std::vector<std::shared_ptr<TensorNode>> inputs;
  std::function<void(TensorNode&)> backward;

  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

template <typename T>
class Tensor {
 public:
  using Node = TensorNode<T>;

  Tensor() : node_(std::make_shared<Node>()) {}
  explicit Tensor(Shape shape, T fill = T(0)) : Tensor() {
    check_shape(shape);
    node_->shape = shape;
    node_->value.assign(shape.numel(), fill);
  }
  Tensor(Shape shape, std::vector<T> values) : Tensor() {
    check_shape(shape);
    if (values.size() != shape.numel()) {
      throw ShapeError("tensor of shape " + shape.str() + " needs " +
                       std::to_string(shape.numel()) + " values, got " +
                       std::to_string(values.size()));
    }
    node_->shape = shape;
    node_->value = std::move(values);
  }

  static Tensor zeros(Shape shape) { return Tensor(shape, T(0)); }
  static Tensor full(Shape shape, T v) { return Tensor(shape, v); }
  static Tensor scalar(T v) { return Tensor(Shape{1, 1, 1, 1}, v); }

  const Shape& shape() const { return node_->shape; }
  std::size_t numel() const { return node_->value.size(); }
  std::span<const T> data() const { return node_->value; }
  // In-place access is reserved for leaves: initializers and optimizers.
  std::span<T> mutable_data() { return node_->value; }

  std::size_t index(int n, int c, int y, int x) const {
    const Shape& s = node_->shape;
    return ((static_cast<std::size_t>(n) * s.c + c) * s.h + y) * s.w + x;
  }
  T at(int n, int c, int y, int x) const { return node_->value[index(n, c, y, x)]; }
  T item() const;

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    node_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return !node_->grad.empty(); }
  // Accumulated gradient; all zeros when nothing reached this tensor.
  std::vector<T> grad() const {
    if (node_->grad.empty()) return std::vector<T>(numel(), T(0));
    return node_->grad;
  }
  void zero_grad() { node_->grad.assign(numel(), T(0)); }

  // New leaf holding a copy of the values, cut from the graph.
  Tensor detach() const { return Tensor(shape(), node_->value); }

  const std::shared_ptr<Node>& node() const { return node_; }
  static Tensor from_node(std::shared_ptr<Node> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

 private:
  static void check_shape(const Shape& s) {
    if (s.n < 0 || s.c < 0 || s.h < 0 || s.w < 0) {
      throw ShapeError("negative dimension in shape " + s.str());
    }
  }

  std::shared_ptr<Node> node_;
};

// Disables recording on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// Ordered list of recorded nodes reachable from a loss.
template <typename T>
class Tape {
 public:
  static Tape collect(const Tensor<T>& root);

  std::size_t size() const { return nodes_.size(); }
  // Recording indices in visiting order (descending).
  std::vector<std::uint64_t> visit_order() const;
  void run(const Tensor<T>& root) const;

 private:
  std::vector<std::shared_ptr<TensorNode<T>>> nodes_;
};

// Populates gradients of every leaf reachable from a scalar loss.
// Throws UsageError when loss holds more than one element.
template <typename T>
void backward(const Tensor<T>& loss);

namespace detail {

std::uint64_t next_record_index();

// Wires `out` into the graph when recording is on and some input needs
// gradients. The closure reads out.grad and accumulates into the inputs.
template <typename T>
void record(Tensor<T>& out, std::vector<Tensor<T>> inputs,
            std::function<void(TensorNode<T>&)> fn) {
  if (!grad_enabled()) return;
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return;
  auto& node = *out.node();
  node.requires_grad = true;
  node.order = next_record_index();
  node.inputs.reserve(inputs.size());
  for (auto& in : inputs) node.inputs.push_back(in.node());
  node.backward = std::move(fn);
}

}  // namespace detail

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) {
    throw UsageError("item() on tensor of shape " + shape().str());
  }
  return node_->value[0];
}

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace manet
