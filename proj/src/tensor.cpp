#include "kdgan/tensor.hpp"

#include <algorithm>
#include <malloc.h>

#include <atomic>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace kdgan {

std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto extent : shape) n *= extent;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

std::uint64_t next_node_sequence() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}

namespace {
thread_local bool g_grad_enabled = true;

// Activation buffers are large and short-lived; serving them from the heap
// instead of fresh mappings avoids page faults on every training step.
const bool g_allocator_tuned = [] {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  return true;
}();
}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

namespace {

template <typename T>
std::shared_ptr<Node<T>> make_leaf(Shape shape, std::vector<T> values, bool requires_grad) {
  for (auto extent : shape) {
    if (extent <= 0) throw ShapeError("tensor extents must be positive, got " + to_string(shape));
  }
  if (static_cast<std::int64_t>(values.size()) != numel(shape)) {
    throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " +
                     to_string(shape));
  }
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  node->seq = next_node_sequence();
  return node;
}

}  // namespace

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  auto n = kdgan::numel(shape);
  return Tensor(make_leaf<T>(std::move(shape), std::vector<T>(static_cast<std::size_t>(std::max<std::int64_t>(n, 0)), T(0)),
                             requires_grad));
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  auto n = kdgan::numel(shape);
  return Tensor(make_leaf<T>(std::move(shape), std::vector<T>(static_cast<std::size_t>(std::max<std::int64_t>(n, 0)), value),
                             requires_grad));
}

template <typename T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> values, bool requires_grad) {
  return Tensor(make_leaf<T>(std::move(shape), std::move(values), requires_grad));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value) {
  return Tensor(make_leaf<T>(Shape{}, std::vector<T>{value}, false));
}

template <typename T>
T Tensor<T>::item() const {
  if (node_->value.size() != 1) {
    throw ShapeError("item() needs a single-element tensor, got " + to_string(node_->shape));
  }
  return node_->value[0];
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(make_leaf<T>(node_->shape, node_->value, false));
}

template <typename T>
std::vector<Node<T>*> backward_order(const Tensor<T>& root) {
  std::vector<Node<T>*> nodes;
  std::unordered_set<const Node<T>*> seen;
  std::vector<Node<T>*> stack{root.node().get()};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    Node<T>* n = stack.back();
    stack.pop_back();
    nodes.push_back(n);
    for (auto& in : n->inputs) {
      if (in->requires_grad && seen.insert(in.get()).second) stack.push_back(in.get());
    }
  }
  std::sort(nodes.begin(), nodes.end(), [](const Node<T>* a, const Node<T>* b) { return a->seq > b->seq; });
  return nodes;
}

template <typename T>
void Tensor<T>::backward() const {
  if (node_->value.size() != 1) {
    throw ShapeError("backward() needs a scalar root, got shape " + to_string(node_->shape));
  }
  if (!node_->requires_grad) {
    throw std::invalid_argument("backward() root does not depend on any tensor requiring grad");
  }
  auto order = backward_order(*this);
  for (Node<T>* n : order) {
    if (!n->is_leaf()) n->grad.clear();
  }
  node_->ensure_grad();
  node_->grad[0] += T(1);
  for (Node<T>* n : order) {
    if (n->is_leaf()) continue;
    n->ensure_grad();
    if (n->backward) n->backward(*n);
    if (n != node_.get()) {
      // Intermediate gradients are consumed exactly once.
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }
}

template <typename T>
void require_finite(std::span<const T> values, const char* what) {
  bool ok = true;
  for (T v : values) ok &= std::isfinite(v);
  if (!ok) throw NumericError(std::string("non-finite value in ") + what);
}

template class Tensor<float>;
template class Tensor<double>;
template std::vector<Node<float>*> backward_order(const Tensor<float>&);
template std::vector<Node<double>*> backward_order(const Tensor<double>&);
template void require_finite<float>(std::span<const float>, const char*);
template void require_finite<double>(std::span<const double>, const char*);

}  // namespace kdgan
