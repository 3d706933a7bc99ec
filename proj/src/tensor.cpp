#include "s4nd/tensor.hpp"

#include <algorithm>
#include <sstream>

namespace s4nd {

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

Index shape_volume(const Shape& shape) {
  Index v = 1;
  for (Index d : shape) v *= d;
  return v;
}

namespace {

void validate_shape(const Shape& shape) {
  if (shape.empty()) throw DimensionError("tensor shape must have at least one axis");
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] < 1) {
      throw DimensionError("tensor axis " + std::to_string(i) + " has extent " +
                           std::to_string(shape[i]) + " in shape " + shape_string(shape));
    }
  }
}

}  // namespace

template <std::floating_point T>
Tensor<T>::Tensor(Shape shape, T fill) : shape_(std::move(shape)) {
  validate_shape(shape_);
  data_.assign(static_cast<std::size_t>(shape_volume(shape_)), fill);
}

template <std::floating_point T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
  validate_shape(shape_);
  if (static_cast<Index>(data_.size()) != shape_volume(shape_)) {
    throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                         " does not match shape " + shape_string(shape_));
  }
}

template <std::floating_point T>
Index Tensor<T>::offset(std::span<const Index> coord) const {
  if (coord.size() != shape_.size()) throw DimensionError("coordinate rank does not match tensor rank");
  Index off = 0;
  for (std::size_t i = 0; i < coord.size(); ++i) {
    if (coord[i] < 0 || coord[i] >= shape_[i]) {
      throw DimensionError("coordinate out of range on axis " + std::to_string(i));
    }
    off = off * shape_[i] + coord[i];
  }
  return off;
}

template <std::floating_point T>
Shape Tensor<T>::coordinate(Index linear) const {
  if (linear < 0 || linear >= size()) throw DimensionError("linear index out of range");
  Shape coord(shape_.size());
  for (std::size_t i = shape_.size(); i-- > 0;) {
    coord[i] = linear % shape_[i];
    linear /= shape_[i];
  }
  return coord;
}

template <std::floating_point T>
void Tensor<T>::fill(T value) {
  std::fill(data_.begin(), data_.end(), value);
}

template <std::floating_point T>
Tensor<T> Tensor<T>::reshaped(Shape shape) const {
  return Tensor(std::move(shape), data_);
}

template <std::floating_point T>
Index Tensor<T>::dim5(std::size_t axis) const {
  if (shape_.size() != 5) throw DimensionError("expected a rank-5 tensor, got shape " + shape_string(shape_));
  return shape_[axis];
}

template <std::floating_point T>
void require_rank5(const Tensor<T>& t, const char* what) {
  if (t.rank() != 5) {
    throw DimensionError(std::string(what) + " must be rank 5 (batch, channels, depth, height, width), got " +
                         shape_string(t.shape()));
  }
}

template class Tensor<float>;
template class Tensor<double>;
template void require_rank5(const Tensor<float>&, const char*);
template void require_rank5(const Tensor<double>&, const char*);

}  // namespace s4nd
