#pragma once

// Dense tensors with define-by-run reverse-mode differentiation.
//
// A Tensor is a cheap handle onto a shared graph node. Every primitive in
// ops.hpp creates a fresh node; when any operand requires a gradient the
// node records its operands and a backward rule. backward() collects the
// nodes reachable from a scalar root, orders them by creation sequence
// (operands always precede their consumers) and runs each rule once.
//
// Element type is a template parameter: float for training, double for
// finite-difference gradient checks.

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace kdgan {

using Shape = std::vector<std::int64_t>;

std::int64_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until a backward pass touches this node
  bool requires_grad = false;
  std::uint64_t seq = 0;
  const char* op = "leaf";
  bool finite_checked = false;  // set once an op output passed the finiteness check
  std::vector<std::shared_ptr<Node<T>>> inputs;
  // Reads this node's grad and accumulates into inputs' grads.
  std::function<void(Node<T>&)> backward;

  bool is_leaf() const { return inputs.empty(); }
  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
  }
};

std::uint64_t next_node_sequence();

// While a NoGradGuard is alive on this thread, ops record no graph.
bool grad_enabled();
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false);
  static Tensor scalar(T value);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::int64_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t rank() const { return node_->shape.size(); }
  std::int64_t numel() const { return static_cast<std::int64_t>(node_->value.size()); }

  std::span<const T> values() const { return node_->value; }
  // Mutable access is for leaves (parameters, inputs) outside a live graph.
  std::span<T> mutable_values() { return node_->value; }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  bool has_grad() const { return !node_->grad.empty(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }
  void zero_grad() { node_->grad.clear(); }

  T item() const;
  T at(std::int64_t flat_index) const { return node_->value.at(static_cast<std::size_t>(flat_index)); }

  // New leaf holding a copy of the values; gradients never flow through it.
  Tensor detach() const;

  // Seeds d(root)/d(root) = 1 and propagates into every reachable node that
  // requires a gradient. Leaf gradients accumulate across calls.
  void backward() const;

  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

// Nodes reachable from root that take part in differentiation, in the order
// their backward rules must run (consumers first).
template <typename T>
std::vector<Node<T>*> backward_order(const Tensor<T>& root);

// Throws NumericError naming `what` if any value is NaN or infinite.
template <typename T>
void require_finite(std::span<const T> values, const char* what);

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace kdgan
