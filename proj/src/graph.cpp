#include "etide/graph.hpp"

namespace etide {

template <class T>
Var<T> Graph<T>::constant(Tensor<T> value) {
  nodes_.push_back(Node{std::move(value), nullptr, nullptr, false});
  return Var<T>(this, nodes_.size() - 1);
}

template <class T>
Var<T> Graph<T>::parameter(Parameter<T>& p) {
  Node n{p.value, nullptr, nullptr, grad_enabled_};
  if (grad_enabled_) {
    n.backward = [&p](Graph&, const Tensor<T>& g) {
      if (p.grad.shape() != p.value.shape()) p.grad = Tensor<T>(p.value.shape());
      auto dst = p.grad.data();
      auto src = g.data();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    };
  }
  nodes_.push_back(std::move(n));
  return Var<T>(this, nodes_.size() - 1);
}

template <class T>
Var<T> Graph<T>::record(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn fn) {
  return record(std::move(value), std::vector<Var<T>>(inputs), std::move(fn));
}

template <class T>
Var<T> Graph<T>::record(Tensor<T> value, const std::vector<Var<T>>& inputs, BackwardFn fn) {
  bool needs = false;
  if (grad_enabled_) {
    for (const auto& in : inputs) needs = needs || nodes_[in.id()].requires_grad;
  }
  nodes_.push_back(Node{std::move(value), nullptr, needs ? std::move(fn) : nullptr, needs});
  return Var<T>(this, nodes_.size() - 1);
}

template <class T>
Tensor<T>& Graph<T>::grad(const Var<T>& v) {
  auto& n = nodes_[v.id()];
  if (!n.grad) n.grad = std::make_unique<Tensor<T>>(n.value.shape());
  return *n.grad;
}

template <class T>
const Tensor<T>* Graph<T>::grad_if(const Var<T>& v) const {
  return nodes_[v.id()].grad.get();
}

template <class T>
void Graph<T>::backward(const Var<T>& root) {
  if (value(root).size() != 1) throw ShapeError("backward() root must be a scalar, got " + shape_str(value(root).shape()));
  grad(root).fill(T{1});
  for (std::size_t i = root.id() + 1; i-- > 0;) {
    auto& n = nodes_[i];
    if (!n.backward || !n.grad) continue;
    n.backward(*this, *n.grad);
  }
}

template class Graph<float>;
template class Graph<double>;

}  // namespace etide
