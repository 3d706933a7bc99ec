#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "s4nd/tensor.hpp"

namespace s4nd {

/// Extents in (depth, height, width) order, i.e. (z, y, x).
struct Extent3 {
  Index d = 1;
  Index h = 1;
  Index w = 1;

  friend bool operator==(const Extent3&, const Extent3&) = default;
};

struct ConvParams {
  Extent3 kernel{3, 3, 3};
  Extent3 stride{1, 1, 1};
  Extent3 padding{0, 0, 0};
  Index in_channels = 1;
  Index out_channels = 1;

  void validate() const;
  /// floor((in + 2p - k) / s) + 1 per axis; GeometryError when any extent < 1.
  Extent3 output_extent(Extent3 input) const;
  Index taps() const { return kernel.d * kernel.h * kernel.w; }
  Shape weight_shape() const { return {out_channels, in_channels, kernel.d, kernel.h, kernel.w}; }
};

struct PoolParams {
  Extent3 kernel{1, 2, 2};
  Extent3 stride{1, 2, 2};

  void validate() const;
  Extent3 output_extent(Extent3 input) const;
};

enum class ConvAlgorithm { direct, im2col };

enum class NormMode { train, infer };

template <typename T>
struct BatchNormState {
  std::vector<T> running_mean;
  std::vector<T> running_var;
  T momentum = T(0.9);
  T epsilon = T(1e-5);

  explicit BatchNormState(Index channels = 0)
      : running_mean(static_cast<std::size_t>(channels), T(0)),
        running_var(static_cast<std::size_t>(channels), T(1)) {}
};

/// Values a batch-norm forward keeps for its backward pass.
template <typename T>
struct BatchNormCache {
  NormMode mode = NormMode::train;
  std::vector<T> mean;
  std::vector<T> stddev;
  Tensor<T> normalized;
};

template <typename T>
struct ConvGradients {
  Tensor<T> input;
  Tensor<T> weights;
  Tensor<T> bias;
};

template <typename T>
struct MaxPoolResult {
  Tensor<T> output;
  /// Linear input index of each window's maximum; lowest index wins ties.
  std::vector<Index> argmax;
};

template <typename T>
struct BatchNormGradients {
  Tensor<T> input;
  Tensor<T> gamma;
  Tensor<T> beta;
};

Extent3 spatial_extent(const Shape& shape);

// Forward kernels. All are pure; the OpenMP paths give bit-identical results
// for any thread count.

template <std::floating_point T>
Tensor<T> conv3d(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& bias,
                 const ConvParams& params, ConvAlgorithm algorithm = ConvAlgorithm::im2col);

/// 3x3x3 convolution with unit padding and the given stride; the learnable
/// alternative to pooling.
template <std::floating_point T>
Tensor<T> conv3d_stride2_downsample(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& bias,
                                    Extent3 stride = {1, 2, 2});

template <std::floating_point T>
MaxPoolResult<T> maxpool3d(const Tensor<T>& input, const PoolParams& params);

template <std::floating_point T>
Tensor<T> avgpool3d(const Tensor<T>& input, const PoolParams& params);

template <std::floating_point T>
Tensor<T> batchnorm(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                    BatchNormState<T>& state, NormMode mode, BatchNormCache<T>* cache = nullptr);

template <std::floating_point T>
Tensor<T> relu(const Tensor<T>& input);

template <std::floating_point T>
Tensor<T> sigmoid(const Tensor<T>& input);

template <std::floating_point T>
Tensor<T> concat_channels(std::span<const Tensor<T>* const> inputs);

template <std::floating_point T>
Tensor<T> concat_channels(std::initializer_list<const Tensor<T>*> inputs) {
  std::vector<const Tensor<T>*> v(inputs);
  return concat_channels<T>(std::span<const Tensor<T>* const>(v));
}

template <std::floating_point T>
Tensor<T> slice_channels(const Tensor<T>& input, Index begin, Index count);

// Backward kernels.

template <std::floating_point T>
ConvGradients<T> conv3d_backward(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& grad_output,
                                 const ConvParams& params);

template <std::floating_point T>
Tensor<T> maxpool3d_backward(const Tensor<T>& grad_output, std::span<const Index> argmax, const Shape& input_shape);

template <std::floating_point T>
Tensor<T> avgpool3d_backward(const Tensor<T>& grad_output, const Shape& input_shape, const PoolParams& params);

template <std::floating_point T>
BatchNormGradients<T> batchnorm_backward(const Tensor<T>& grad_output, const Tensor<T>& gamma,
                                         const BatchNormCache<T>& cache);

template <std::floating_point T>
Tensor<T> relu_backward(const Tensor<T>& grad_output, const Tensor<T>& input);

template <std::floating_point T>
Tensor<T> sigmoid_backward(const Tensor<T>& grad_output, const Tensor<T>& output);

/// Numerically stable logistic function.
template <std::floating_point T>
inline T stable_sigmoid(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

}  // namespace s4nd
