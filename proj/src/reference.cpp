#include "s4nd/reference.hpp"

#include <cmath>
#include <limits>

namespace s4nd::reference {

template <std::floating_point T>
Tensor<T> conv3d(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& bias, const ConvParams& params) {
  const Extent3 o = params.output_extent(spatial_extent(input.shape()));
  const Index di = input.depth(), hi = input.height(), wi = input.width();
  Tensor<T> out(Shape{input.batch(), params.out_channels, o.d, o.h, o.w});
  for (Index n = 0; n < input.batch(); ++n)
    for (Index co = 0; co < params.out_channels; ++co)
      for (Index od = 0; od < o.d; ++od)
        for (Index oh = 0; oh < o.h; ++oh)
          for (Index ow = 0; ow < o.w; ++ow) {
            T acc = T(0);
            for (Index ci = 0; ci < params.in_channels; ++ci)
              for (Index a = 0; a < params.kernel.d; ++a)
                for (Index b = 0; b < params.kernel.h; ++b)
                  for (Index c = 0; c < params.kernel.w; ++c) {
                    const Index z = od * params.stride.d - params.padding.d + a;
                    const Index y = oh * params.stride.h - params.padding.h + b;
                    const Index x = ow * params.stride.w - params.padding.w + c;
                    const bool inside = z >= 0 && z < di && y >= 0 && y < hi && x >= 0 && x < wi;
                    const T v = inside ? input.at(n, ci, z, y, x) : T(0);
                    acc += weights.at(co, ci, a, b, c) * v;
                  }
            out.at(n, co, od, oh, ow) = acc + bias[co];
          }
  return out;
}

template <std::floating_point T>
MaxPoolResult<T> maxpool3d(const Tensor<T>& input, const PoolParams& params) {
  const Extent3 o = params.output_extent(spatial_extent(input.shape()));
  MaxPoolResult<T> r{Tensor<T>(Shape{input.batch(), input.channels(), o.d, o.h, o.w}), {}};
  r.argmax.resize(static_cast<std::size_t>(r.output.size()));
  Index out_index = 0;
  for (Index n = 0; n < input.batch(); ++n)
    for (Index ch = 0; ch < input.channels(); ++ch)
      for (Index od = 0; od < o.d; ++od)
        for (Index oh = 0; oh < o.h; ++oh)
          for (Index ow = 0; ow < o.w; ++ow, ++out_index) {
            Index best = -1;
            T best_value = -std::numeric_limits<T>::infinity();
            for (Index a = 0; a < params.kernel.d; ++a)
              for (Index b = 0; b < params.kernel.h; ++b)
                for (Index c = 0; c < params.kernel.w; ++c) {
                  const Index idx = input.offset5(n, ch, od * params.stride.d + a, oh * params.stride.h + b,
                                                  ow * params.stride.w + c);
                  if (best < 0 || input[idx] > best_value) {
                    best = idx;
                    best_value = input[idx];
                  }
                }
            r.output[out_index] = best_value;
            r.argmax[static_cast<std::size_t>(out_index)] = best;
          }
  return r;
}

template <std::floating_point T>
Tensor<T> avgpool3d(const Tensor<T>& input, const PoolParams& params) {
  const Extent3 o = params.output_extent(spatial_extent(input.shape()));
  Tensor<T> out(Shape{input.batch(), input.channels(), o.d, o.h, o.w});
  const T count = static_cast<T>(params.kernel.d * params.kernel.h * params.kernel.w);
  for (Index n = 0; n < input.batch(); ++n)
    for (Index ch = 0; ch < input.channels(); ++ch)
      for (Index od = 0; od < o.d; ++od)
        for (Index oh = 0; oh < o.h; ++oh)
          for (Index ow = 0; ow < o.w; ++ow) {
            T sum = T(0);
            for (Index a = 0; a < params.kernel.d; ++a)
              for (Index b = 0; b < params.kernel.h; ++b)
                for (Index c = 0; c < params.kernel.w; ++c)
                  sum += input.at(n, ch, od * params.stride.d + a, oh * params.stride.h + b, ow * params.stride.w + c);
            out.at(n, ch, od, oh, ow) = sum / count;
          }
  return out;
}

template <std::floating_point T>
Tensor<T> batchnorm_train(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta, T epsilon) {
  Tensor<T> out(input.shape());
  const Index count = input.batch() * input.spatial_volume();
  for (Index ch = 0; ch < input.channels(); ++ch) {
    T sum = T(0);
    for (Index n = 0; n < input.batch(); ++n)
      for (Index d = 0; d < input.depth(); ++d)
        for (Index h = 0; h < input.height(); ++h)
          for (Index w = 0; w < input.width(); ++w) sum += input.at(n, ch, d, h, w);
    const T mean = sum / static_cast<T>(count);
    T sq = T(0);
    for (Index n = 0; n < input.batch(); ++n)
      for (Index d = 0; d < input.depth(); ++d)
        for (Index h = 0; h < input.height(); ++h)
          for (Index w = 0; w < input.width(); ++w) {
            const T diff = input.at(n, ch, d, h, w) - mean;
            sq += diff * diff;
          }
    const T sd = std::sqrt(sq / static_cast<T>(count) + epsilon);
    for (Index n = 0; n < input.batch(); ++n)
      for (Index d = 0; d < input.depth(); ++d)
        for (Index h = 0; h < input.height(); ++h)
          for (Index w = 0; w < input.width(); ++w)
            out.at(n, ch, d, h, w) = gamma[ch] * ((input.at(n, ch, d, h, w) - mean) / sd) + beta[ch];
  }
  return out;
}

template Tensor<float> conv3d(const Tensor<float>&, const Tensor<float>&, const Tensor<float>&, const ConvParams&);
template Tensor<double> conv3d(const Tensor<double>&, const Tensor<double>&, const Tensor<double>&, const ConvParams&);
template MaxPoolResult<float> maxpool3d(const Tensor<float>&, const PoolParams&);
template MaxPoolResult<double> maxpool3d(const Tensor<double>&, const PoolParams&);
template Tensor<float> avgpool3d(const Tensor<float>&, const PoolParams&);
template Tensor<double> avgpool3d(const Tensor<double>&, const PoolParams&);
template Tensor<float> batchnorm_train(const Tensor<float>&, const Tensor<float>&, const Tensor<float>&, float);
template Tensor<double> batchnorm_train(const Tensor<double>&, const Tensor<double>&, const Tensor<double>&, double);

}  // namespace s4nd::reference
