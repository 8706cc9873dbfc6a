// Dense tensors with reverse-mode automatic differentiation.
//
// A Tensor<T> is a handle to a graph node holding a value buffer, an optional
// gradient buffer, and the backward closure that distributes incoming
// gradients to the node's parents. Values are treated as immutable once the
// tensor has been consumed by an operation; gradient buffers are the only
// mutable state. T is float or double; the double instantiation backs the
// tight gradient checks and the bit-reproducible evaluation mode.
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "mer/error.hpp"
#include "mer/rng.hpp"

namespace mer {

// Tensor storage is 64-byte aligned. Vectorized kernels split work between
// SIMD and scalar tails based on pointer alignment; pinning the base address
// alignment makes every split a pure function of the tensor shape, so runs
// are bit-reproducible regardless of where the allocator places buffers.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::size_t kAlignment = 64;
  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}
  T* allocate(std::size_t n) {
    return static_cast<T*>(
        ::operator new(n * sizeof(T), std::align_val_t(kAlignment)));
  }
  void deallocate(T* p, std::size_t) {
    ::operator delete(p, std::align_val_t(kAlignment));
  }
  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
  template <typename U>
  bool operator!=(const AlignedAllocator<U>&) const { return false; }
  // default construction leaves trivial scalars uninitialized; ops that fill
  // their output completely skip the redundant zeroing pass
  template <typename U>
  void construct(U* p) { ::new (static_cast<void*>(p)) U; }
  template <typename U, typename... Args>
  void construct(U* p, Args&&... args) {
    ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
  }
};

template <typename T>
using AlignedVec = std::vector<T, AlignedAllocator<T>>;

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

inline void check(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

// Thread-local switch: when gradients are disabled, ops do not record parents
// or backward closures. Each worker thread has its own flag.
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

inline bool grad_enabled() { return grad_mode_flag(); }

class NoGradGuard {
 public:
  NoGradGuard() : prev_(grad_mode_flag()) { grad_mode_flag() = false; }
  ~NoGradGuard() { grad_mode_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <typename T>
struct Node {
  Shape shape;
  AlignedVec<T> value;
  AlignedVec<T> grad;  // sized lazily, same length as value when present
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node<T>>> parents;
  std::function<void(Node<T>&)> backward_fn;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
  }
};

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  static Tensor zeros(Shape shape) {
    return Tensor(std::move(shape), T(0));
  }
  // Uninitialized storage; caller must write every element.
  static Tensor uninitialized(Shape shape) {
    Tensor t;
    t.node_ = std::make_shared<Node<T>>();
    t.node_->value.resize(static_cast<std::size_t>(numel(shape)));
    t.node_->shape = std::move(shape);
    return t;
  }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), T(1)); }
  static Tensor full(Shape shape, T fill) {
    return Tensor(std::move(shape), fill);
  }
  static Tensor scalar(T v) { return Tensor(Shape{}, v); }

  static Tensor from_data(Shape shape, const std::vector<T>& data) {
    if (numel(shape) != static_cast<std::int64_t>(data.size()))
      throw ShapeError("from_data: " + shape_str(shape) + " does not hold " +
                       std::to_string(data.size()) + " values");
    Tensor t;
    t.node_ = std::make_shared<Node<T>>();
    t.node_->shape = std::move(shape);
    t.node_->value.assign(data.begin(), data.end());
    return t;
  }

  template <typename It>
  static Tensor from_range(Shape shape, It first, It last) {
    Tensor t;
    t.node_ = std::make_shared<Node<T>>();
    t.node_->value.assign(first, last);
    if (numel(shape) != static_cast<std::int64_t>(t.node_->value.size()))
      throw ShapeError("from_range: element count mismatch for " +
                       shape_str(shape));
    t.node_->shape = std::move(shape);
    return t;
  }

  static Tensor uniform(Shape shape, Rng& rng, double lo, double hi) {
    Tensor t(shape, T(0));
    for (auto& v : t.node_->value) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
  }

  static Tensor normal(Shape shape, Rng& rng, double mean = 0.0,
                       double stddev = 1.0) {
    Tensor t(shape, T(0));
    for (auto& v : t.node_->value) v = static_cast<T>(rng.normal(mean, stddev));
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::int64_t dim(int i) const {
    const auto& s = node_->shape;
    return s[i < 0 ? s.size() + i : static_cast<std::size_t>(i)];
  }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  std::int64_t size() const { return static_cast<std::int64_t>(node_->value.size()); }

  std::span<const T> data() const { return node_->value; }
  // Direct mutation is only legitimate before the tensor enters the graph
  // (initialization, optimizer updates on leaves).
  std::span<T> mutable_data() { return node_->value; }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool flag) {
    node_->requires_grad = flag;
    return *this;
  }

  bool has_grad() const { return node_ && !node_->grad.empty(); }
  std::span<const T> grad() const {
    if (!has_grad())
      throw UsageError("grad accessed before backward populated it");
    return node_->grad;
  }
  std::span<T> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() {
    if (node_) node_->grad.assign(node_->value.size(), T(0));
  }

  T item() const {
    if (size() != 1) throw UsageError("item() on non-scalar tensor");
    return node_->value[0];
  }

  const std::shared_ptr<Node<T>>& node() const { return node_; }

  // Detached copy: same values, fresh leaf node outside the graph.
  Tensor detach() const {
    Tensor t;
    t.node_ = std::make_shared<Node<T>>();
    t.node_->shape = node_->shape;
    t.node_->value = node_->value;
    return t;
  }

  // Reverse-mode pass from this scalar. Every reachable node's backward runs
  // exactly once, in reverse topological order.
  void backward() {
    if (size() != 1)
      throw UsageError("backward() requires a scalar loss, got " +
                       shape_str(node_->shape));
    std::vector<Node<T>*> order;
    topological_order(node_.get(), order);
    node_->ensure_grad();
    node_->grad[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node<T>* n = *it;
      if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
    }
  }

 private:
  Tensor(Shape shape, T fill) {
    node_ = std::make_shared<Node<T>>();
    node_->value.assign(static_cast<std::size_t>(numel(shape)), fill);
    node_->shape = std::move(shape);
  }

  static void topological_order(Node<T>* root, std::vector<Node<T>*>& order) {
    // Iterative post-order DFS over the requires_grad subgraph.
    std::unordered_set<Node<T>*> visited;
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    stack.emplace_back(root, 0);
    visited.insert(root);
    while (!stack.empty()) {
      auto& [node, next_child] = stack.back();
      bool descended = false;
      while (next_child < node->parents.size()) {
        Node<T>* parent = node->parents[next_child++].get();
        if (parent->requires_grad && !visited.count(parent)) {
          visited.insert(parent);
          stack.emplace_back(parent, 0);
          descended = true;
          break;
        }
      }
      if (!descended && next_child >= node->parents.size()) {
        order.push_back(node);
        stack.pop_back();
      }
    }
  }

  std::shared_ptr<Node<T>> node_;
};

// Output-node factory for ops that overwrite every element of their result.
// Ops that accumulate into their output must use make_zeroed.
template <typename T>
Tensor<T> make_tensor(Shape shape) {
  return Tensor<T>::uninitialized(std::move(shape));
}

template <typename T>
Tensor<T> make_zeroed(Shape shape) {
  return Tensor<T>::zeros(std::move(shape));
}

// Wires the autodiff edges for `out` if gradients are enabled and any input
// requires them. `backward` receives the finished output node.
template <typename T>
void attach_backward(Tensor<T>& out,
                     std::vector<std::shared_ptr<Node<T>>> parents,
                     std::function<void(Node<T>&)> backward) {
  if (!grad_enabled()) return;
  bool any = false;
  for (const auto& p : parents) any = any || p->requires_grad;
  if (!any) return;
  out.node()->requires_grad = true;
  auto* node = const_cast<Node<T>*>(out.node().get());
  node->parents = std::move(parents);
  node->backward_fn = std::move(backward);
}

}  // namespace mer
