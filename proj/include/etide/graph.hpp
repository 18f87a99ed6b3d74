#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "etide/tensor.hpp"

namespace etide {

/// A learned array plus its gradient buffer.
template <class T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

  void zero_grad() { grad = Tensor<T>(value.shape()); }

  template <class U>
  Parameter<U> cast() const {
    Parameter<U> p(name, value.template cast<U>());
    p.grad = grad.template cast<U>();
    return p;
  }
};

template <class T>
class Graph;

/// Handle to a value recorded in a Graph. Cheap to copy; only valid while
/// its Graph is alive.
template <class T>
class Var {
 public:
  Var() = default;
  Var(Graph<T>* g, std::size_t id) : graph_(g), id_(id) {}

  Graph<T>& graph() const { return *graph_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return graph_ != nullptr; }
  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;

 private:
  Graph<T>* graph_ = nullptr;
  std::size_t id_ = 0;
};

/// Record of executed operations. Backward visits nodes in exact reverse
/// execution order; gradient contributions accumulate additively.
template <class T>
class Graph {
 public:
  /// Receives the gradient of the node's output.
  using BackwardFn = std::function<void(Graph&, const Tensor<T>&)>;

  explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool grad_enabled() const noexcept { return grad_enabled_; }

  Var<T> constant(Tensor<T> value);
  /// Leaf bound to `p`; backward adds into p.grad. `p` must outlive the graph.
  Var<T> parameter(Parameter<T>& p);

  /// Appends an op result. `fn` runs during backward only if some input requires grad.
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn fn);
  Var<T> record(Tensor<T> value, const std::vector<Var<T>>& inputs, BackwardFn fn);

  const Tensor<T>& value(const Var<T>& v) const { return nodes_[v.id()].value; }
  bool requires_grad(const Var<T>& v) const { return nodes_[v.id()].requires_grad; }

  /// Gradient buffer of `v`, zero-allocated on first use.
  Tensor<T>& grad(const Var<T>& v);
  /// Gradient of `v` after backward(), or nullptr if nothing flowed into it.
  const Tensor<T>* grad_if(const Var<T>& v) const;

  /// Seeds d(root)/d(root) = 1 and propagates. `root` must hold one element.
  void backward(const Var<T>& root);

  std::size_t size() const noexcept { return nodes_.size(); }
  /// Bytes held by recorded values, gradients excluded.
  std::size_t value_bytes() const noexcept {
    std::size_t n = 0;
    for (const auto& node : nodes_) n += node.value.size() * sizeof(T);
    return n;
  }

 private:
  struct Node {
    Tensor<T> value;
    std::unique_ptr<Tensor<T>> grad;
    BackwardFn backward;
    bool requires_grad = false;
  };

  std::deque<Node> nodes_;
  bool grad_enabled_;
};

template <class T>
const Tensor<T>& Var<T>::value() const {
  return graph_->value(*this);
}

template <class T>
bool Var<T>::requires_grad() const {
  return graph_->requires_grad(*this);
}

extern template class Graph<float>;
extern template class Graph<double>;

}  // namespace etide
