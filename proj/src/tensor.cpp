#include "etide/tensor.hpp"

#include <algorithm>
#include <sstream>

namespace etide {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) {
    if (d < 0) throw ShapeError("negative extent in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

void require_same_shape(const Shape& a, const Shape& b, const char* what) {
  if (a.size() != b.size())
    throw ShapeError(std::string(what) + ": rank mismatch " + shape_str(a) + " vs " + shape_str(b));
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] != b[i]) {
      throw ShapeError(std::string(what) + ": dimension " + std::to_string(i) + " mismatch (" +
                       std::to_string(a[i]) + " vs " + std::to_string(b[i]) + ")");
    }
  }
}

void require_rank(const Shape& shape, int rank, const char* what) {
  if (static_cast<int>(shape.size()) != rank) {
    throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(shape));
  }
}

template <class T>
Tensor<T>::Tensor(Shape shape, T fill)
    : shape_(std::move(shape)), data_(static_cast<std::size_t>(shape_numel(shape_)), fill) {}

template <class T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (static_cast<std::int64_t>(data_.size()) != shape_numel(shape_)) {
    throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                     shape_str(shape_));
  }
}

template <class T>
std::int64_t Tensor<T>::dim(int i) const {
  if (i < 0) i += rank();
  if (i < 0 || i >= rank())
    throw ShapeError("dimension index " + std::to_string(i) + " out of range for " + shape_str(shape_));
  return shape_[static_cast<std::size_t>(i)];
}

template <class T>
T Tensor<T>::item() const {
  if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
  return data_[0];
}

template <class T>
Tensor<T> Tensor<T>::reshaped(Shape shape) const& {
  Tensor copy = *this;
  return std::move(copy).reshaped(std::move(shape));
}

template <class T>
Tensor<T> Tensor<T>::reshaped(Shape shape) && {
  if (shape_numel(shape) != static_cast<std::int64_t>(data_.size())) {
    throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  shape_ = std::move(shape);
  return std::move(*this);
}

template <class T>
void Tensor<T>::fill(T v) {
  std::fill(data_.begin(), data_.end(), v);
}

template class Tensor<float>;
template class Tensor<double>;
template class Tensor<std::uint8_t>;

}  // namespace etide
