#pragma once

#include <concepts>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "s4nd/error.hpp"

namespace s4nd {

using Index = std::int64_t;
using Shape = std::vector<Index>;

std::string shape_string(const Shape& shape);
Index shape_volume(const Shape& shape);

/// Dense row-major array. Volumes use the (batch, channels, depth, height,
/// width) axis order with width fastest; parameters and scalars use lower
/// ranks. Every extent is at least one and the element count always equals
/// the product of the extents.
template <std::floating_point T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{0});
  Tensor(Shape shape, std::vector<T> data);

  static Tensor scalar(T value) { return Tensor(Shape{1}, std::vector<T>{value}); }

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index dim(Index axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
  Index size() const { return static_cast<Index>(data_.size()); }
  bool empty() const { return data_.empty(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](Index i) { return data_[static_cast<std::size_t>(i)]; }
  const T& operator[](Index i) const { return data_[static_cast<std::size_t>(i)]; }

  /// Linear offset of a full coordinate; bounds-checked.
  Index offset(std::span<const Index> coord) const;
  Shape coordinate(Index linear) const;

  // Rank-5 accessors.
  Index batch() const { return dim5(0); }
  Index channels() const { return dim5(1); }
  Index depth() const { return dim5(2); }
  Index height() const { return dim5(3); }
  Index width() const { return dim5(4); }
  Index spatial_volume() const { return depth() * height() * width(); }

  Index offset5(Index n, Index c, Index d, Index h, Index w) const {
    return (((n * shape_[1] + c) * shape_[2] + d) * shape_[3] + h) * shape_[4] + w;
  }
  T& at(Index n, Index c, Index d, Index h, Index w) {
    return data_[static_cast<std::size_t>(offset5(n, c, d, h, w))];
  }
  const T& at(Index n, Index c, Index d, Index h, Index w) const {
    return data_[static_cast<std::size_t>(offset5(n, c, d, h, w))];
  }

  void fill(T value);
  Tensor reshaped(Shape shape) const;

  template <std::floating_point U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Index dim5(std::size_t axis) const;

  Shape shape_;
  std::vector<T> data_;
};

/// Throws DimensionError unless the tensor has rank 5.
template <std::floating_point T>
void require_rank5(const Tensor<T>& t, const char* what);

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace s4nd
