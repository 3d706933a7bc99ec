#pragma once

// Serial direct-loop kernels. They define the accumulation order that the
// optimized kernels reproduce bit-for-bit, back ConvAlgorithm::direct, and
// serve as the baseline in the benchmarks.

#include "s4nd/kernels.hpp"

namespace s4nd::reference {

template <std::floating_point T>
Tensor<T> conv3d(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& bias, const ConvParams& params);

template <std::floating_point T>
MaxPoolResult<T> maxpool3d(const Tensor<T>& input, const PoolParams& params);

template <std::floating_point T>
Tensor<T> avgpool3d(const Tensor<T>& input, const PoolParams& params);

template <std::floating_point T>
Tensor<T> batchnorm_train(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta, T epsilon);

}  // namespace s4nd::reference
