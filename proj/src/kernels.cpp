#include "s4nd/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "s4nd/reference.hpp"

namespace s4nd {

namespace {

// Output positions processed per im2col tile. Fixed so that tiling, and with
// it every accumulation order, is independent of the worker count.
constexpr Index kTile = 256;
// Output channels per register block in the GEMM.
constexpr Index kRowBlock = 4;

std::string extent_string(Extent3 e) {
  return "(" + std::to_string(e.d) + "," + std::to_string(e.h) + "," + std::to_string(e.w) + ")";
}

Index out_extent(Index in, Index k, Index s, Index p, const char* axis) {
  const Index span = in + 2 * p - k;
  if (span < 0) {
    throw GeometryError(std::string("window of extent ") + std::to_string(k) + " exceeds padded input extent " +
                        std::to_string(in + 2 * p) + " on the " + axis + " axis");
  }
  return span / s + 1;
}

template <typename T>
void check_bias_like(const Tensor<T>& v, Index expected, const char* what) {
  if (v.rank() != 1 || v.size() != expected) {
    throw DimensionError(std::string(what) + " must be a vector of length " + std::to_string(expected) + ", got " +
                         shape_string(v.shape()));
  }
}

template <typename T>
void check_conv_operands(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& bias,
                         const ConvParams& params) {
  params.validate();
  require_rank5(input, "conv3d input");
  require_rank5(weights, "conv3d weights");
  if (input.channels() != params.in_channels) {
    throw DimensionError("conv3d channel axis: input has " + std::to_string(input.channels()) +
                         " channels, parameters expect " + std::to_string(params.in_channels));
  }
  if (weights.shape() != params.weight_shape()) {
    throw DimensionError("conv3d weights shape " + shape_string(weights.shape()) + " does not match expected " +
                         shape_string(params.weight_shape()));
  }
  check_bias_like(bias, params.out_channels, "conv3d bias");
}

struct ConvGeometry {
  Index batch, cin, cout;
  Index di, hi, wi;
  Index dout, hout, wout;
  Index taps, k_total, positions, in_volume;
};

ConvGeometry make_geometry(const Shape& in_shape, const ConvParams& p) {
  ConvGeometry g{};
  g.batch = in_shape[0];
  g.cin = in_shape[1];
  g.cout = p.out_channels;
  g.di = in_shape[2];
  g.hi = in_shape[3];
  g.wi = in_shape[4];
  const Extent3 o = p.output_extent({g.di, g.hi, g.wi});
  g.dout = o.d;
  g.hout = o.h;
  g.wout = o.w;
  g.taps = p.taps();
  g.k_total = g.cin * g.taps;
  g.positions = o.d * o.h * o.w;
  g.in_volume = g.di * g.hi * g.wi;
  return g;
}

bool is_pointwise(const ConvParams& p) {
  return p.kernel == Extent3{1, 1, 1} && p.stride == Extent3{1, 1, 1} && p.padding == Extent3{0, 0, 0};
}

// Gathers the receptive fields of output positions [p0, p0 + count) of one
// sample into col[k * count + j]; padded taps read as zero.
template <typename T>
void im2col_tile(const T* in, const ConvGeometry& g, const ConvParams& p, Index p0, Index count, T* col) {
  const Index hw_out = g.hout * g.wout;
  for (Index ci = 0; ci < g.cin; ++ci) {
    const T* plane = in + ci * g.in_volume;
    for (Index a = 0; a < p.kernel.d; ++a) {
      for (Index b = 0; b < p.kernel.h; ++b) {
        for (Index c = 0; c < p.kernel.w; ++c) {
          const Index k = ((ci * p.kernel.d + a) * p.kernel.h + b) * p.kernel.w + c;
          T* row = col + k * count;
          for (Index j = 0; j < count; ++j) {
            const Index pos = p0 + j;
            const Index od = pos / hw_out;
            const Index rem = pos % hw_out;
            const Index oh = rem / g.wout;
            const Index ow = rem % g.wout;
            const Index z = od * p.stride.d - p.padding.d + a;
            const Index y = oh * p.stride.h - p.padding.h + b;
            const Index x = ow * p.stride.w - p.padding.w + c;
            const bool inside = z >= 0 && z < g.di && y >= 0 && y < g.hi && x >= 0 && x < g.wi;
            row[j] = inside ? plane[(z * g.hi + y) * g.wi + x] : T(0);
          }
        }
      }
    }
  }
}

// Inverse of im2col_tile for one input channel: accumulates col rows of
// channel ci into the gradient plane.
template <typename T>
void col2im_channel(const T* col, const ConvGeometry& g, const ConvParams& p, Index p0, Index count, Index ci,
                    T* plane) {
  const Index hw_out = g.hout * g.wout;
  for (Index a = 0; a < p.kernel.d; ++a) {
    for (Index b = 0; b < p.kernel.h; ++b) {
      for (Index c = 0; c < p.kernel.w; ++c) {
        const Index k = ((ci * p.kernel.d + a) * p.kernel.h + b) * p.kernel.w + c;
        const T* row = col + k * count;
        for (Index j = 0; j < count; ++j) {
          const Index pos = p0 + j;
          const Index od = pos / hw_out;
          const Index rem = pos % hw_out;
          const Index oh = rem / g.wout;
          const Index ow = rem % g.wout;
          const Index z = od * p.stride.d - p.padding.d + a;
          const Index y = oh * p.stride.h - p.padding.h + b;
          const Index x = ow * p.stride.w - p.padding.w + c;
          if (z >= 0 && z < g.di && y >= 0 && y < g.hi && x >= 0 && x < g.wi) {
            plane[(z * g.hi + y) * g.wi + x] += row[j];
          }
        }
      }
    }
  }
}

// out[r * out_stride + j] = sum_k a[r * k_total + k] * b[k * b_stride + j]
// for r in [r0, r1), accumulated from zero in ascending k. Each output element
// sees exactly the addition sequence of the direct loop.
template <typename T>
void gemm_rows(const T* a, Index k_total, const T* b, Index b_stride, Index count, T* out, Index out_stride, Index r0,
               Index r1) {
  T acc[kRowBlock][kTile];
  for (Index r = r0; r < r1; r += kRowBlock) {
    const Index rows = std::min(kRowBlock, r1 - r);
    for (Index i = 0; i < rows; ++i) std::fill(acc[i], acc[i] + count, T(0));
    if (rows == kRowBlock) {
      const T* a0 = a + (r + 0) * k_total;
      const T* a1 = a + (r + 1) * k_total;
      const T* a2 = a + (r + 2) * k_total;
      const T* a3 = a + (r + 3) * k_total;
      for (Index k = 0; k < k_total; ++k) {
        const T w0 = a0[k], w1 = a1[k], w2 = a2[k], w3 = a3[k];
        const T* brow = b + k * b_stride;
        T* __restrict c0 = acc[0];
        T* __restrict c1 = acc[1];
        T* __restrict c2 = acc[2];
        T* __restrict c3 = acc[3];
        for (Index j = 0; j < count; ++j) {
          const T v = brow[j];
          c0[j] += w0 * v;
          c1[j] += w1 * v;
          c2[j] += w2 * v;
          c3[j] += w3 * v;
        }
      }
    } else {
      for (Index i = 0; i < rows; ++i) {
        const T* ar = a + (r + i) * k_total;
        T* __restrict c = acc[i];
        for (Index k = 0; k < k_total; ++k) {
          const T w = ar[k];
          const T* brow = b + k * b_stride;
          for (Index j = 0; j < count; ++j) c[j] += w * brow[j];
        }
      }
    }
    for (Index i = 0; i < rows; ++i) std::copy(acc[i], acc[i] + count, out + (r + i) * out_stride);
  }
}

template <typename T>
Tensor<T> conv3d_im2col(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& bias,
                        const ConvParams& params) {
  const ConvGeometry g = make_geometry(input.shape(), params);
  Tensor<T> output(Shape{g.batch, g.cout, g.dout, g.hout, g.wout});
  const Index tiles = (g.positions + kTile - 1) / kTile;
  const Index jobs = g.batch * tiles;
  const bool pointwise = is_pointwise(params);
  const T* w = weights.data().data();
  const T* bptr = bias.data().data();
  const T* in_base = input.data().data();
  T* out_base = output.data().data();

#pragma omp parallel
  {
    std::vector<T> col(pointwise ? 0 : static_cast<std::size_t>(g.k_total * kTile));
    std::vector<T> tile(static_cast<std::size_t>(g.cout * kTile));
#pragma omp for schedule(static)
    for (Index job = 0; job < jobs; ++job) {
      const Index n = job / tiles;
      const Index p0 = (job % tiles) * kTile;
      const Index count = std::min(kTile, g.positions - p0);
      const T* in = in_base + n * g.cin * g.in_volume;
      const T* b;
      Index b_stride;
      if (pointwise) {
        b = in + p0;
        b_stride = g.in_volume;
      } else {
        im2col_tile(in, g, params, p0, count, col.data());
        b = col.data();
        b_stride = count;
      }
      gemm_rows(w, g.k_total, b, b_stride, count, tile.data(), count, 0, g.cout);
      T* out = out_base + n * g.cout * g.positions;
      for (Index o = 0; o < g.cout; ++o) {
        const T* src = tile.data() + o * count;
        T* dst = out + o * g.positions + p0;
        for (Index j = 0; j < count; ++j) dst[j] = src[j] + bptr[o];
      }
    }
  }
  return output;
}

}  // namespace

Extent3 spatial_extent(const Shape& shape) {
  if (shape.size() != 5) throw DimensionError("expected rank-5 shape, got " + shape_string(shape));
  return {shape[2], shape[3], shape[4]};
}

void ConvParams::validate() const {
  if (kernel.d < 1 || kernel.h < 1 || kernel.w < 1) throw GeometryError("conv kernel extents must be >= 1, got " + extent_string(kernel));
  if (stride.d < 1 || stride.h < 1 || stride.w < 1) throw GeometryError("conv strides must be >= 1, got " + extent_string(stride));
  if (padding.d < 0 || padding.h < 0 || padding.w < 0) throw GeometryError("conv padding must be >= 0, got " + extent_string(padding));
  if (in_channels < 1 || out_channels < 1) throw GeometryError("conv channel counts must be >= 1");
}

Extent3 ConvParams::output_extent(Extent3 in) const {
  validate();
  return {out_extent(in.d, kernel.d, stride.d, padding.d, "depth"),
          out_extent(in.h, kernel.h, stride.h, padding.h, "height"),
          out_extent(in.w, kernel.w, stride.w, padding.w, "width")};
}

void PoolParams::validate() const {
  if (kernel.d < 1 || kernel.h < 1 || kernel.w < 1) throw GeometryError("pool kernel extents must be >= 1, got " + extent_string(kernel));
  if (stride.d < 1 || stride.h < 1 || stride.w < 1) throw GeometryError("pool strides must be >= 1, got " + extent_string(stride));
}

Extent3 PoolParams::output_extent(Extent3 in) const {
  validate();
  return {out_extent(in.d, kernel.d, stride.d, 0, "depth"), out_extent(in.h, kernel.h, stride.h, 0, "height"),
          out_extent(in.w, kernel.w, stride.w, 0, "width")};
}

template <std::floating_point T>
Tensor<T> conv3d(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& bias, const ConvParams& params,
                 ConvAlgorithm algorithm) {
  check_conv_operands(input, weights, bias, params);
  if (algorithm == ConvAlgorithm::direct) return reference::conv3d(input, weights, bias, params);
  return conv3d_im2col(input, weights, bias, params);
}

template <std::floating_point T>
Tensor<T> conv3d_stride2_downsample(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& bias,
                                    Extent3 stride) {
  require_rank5(weights, "downsample weights");
  ConvParams p;
  p.kernel = {3, 3, 3};
  p.stride = stride;
  p.padding = {1, 1, 1};
  p.in_channels = weights.dim(1);
  p.out_channels = weights.dim(0);
  return conv3d(input, weights, bias, p);
}

template <std::floating_point T>
MaxPoolResult<T> maxpool3d(const Tensor<T>& input, const PoolParams& params) {
  require_rank5(input, "maxpool3d input");
  const Extent3 o = params.output_extent(spatial_extent(input.shape()));
  const Index planes = input.batch() * input.channels();
  const Index di = input.depth(), hi = input.height(), wi = input.width();
  const Index in_vol = di * hi * wi, out_vol = o.d * o.h * o.w;
  MaxPoolResult<T> r{Tensor<T>(Shape{input.batch(), input.channels(), o.d, o.h, o.w}),
                     std::vector<Index>(static_cast<std::size_t>(planes * out_vol))};
  const T* src = input.data().data();
  T* dst = r.output.data().data();
  Index* arg = r.argmax.data();
#pragma omp parallel for schedule(static)
  for (Index plane = 0; plane < planes; ++plane) {
    const Index base = plane * in_vol;
    for (Index od = 0; od < o.d; ++od) {
      for (Index oh = 0; oh < o.h; ++oh) {
        for (Index ow = 0; ow < o.w; ++ow) {
          Index best = -1;
          T best_value = -std::numeric_limits<T>::infinity();
          for (Index a = 0; a < params.kernel.d; ++a) {
            const Index z = od * params.stride.d + a;
            for (Index b = 0; b < params.kernel.h; ++b) {
              const Index y = oh * params.stride.h + b;
              const Index row = base + (z * hi + y) * wi + ow * params.stride.w;
              for (Index c = 0; c < params.kernel.w; ++c) {
                const T v = src[row + c];
                if (best < 0 || v > best_value) {
                  best_value = v;
                  best = row + c;
                }
              }
            }
          }
          const Index out_index = plane * out_vol + (od * o.h + oh) * o.w + ow;
          dst[out_index] = best_value;
          arg[out_index] = best;
        }
      }
    }
  }
  return r;
}

template <std::floating_point T>
Tensor<T> avgpool3d(const Tensor<T>& input, const PoolParams& params) {
  require_rank5(input, "avgpool3d input");
  const Extent3 o = params.output_extent(spatial_extent(input.shape()));
  const Index planes = input.batch() * input.channels();
  const Index di = input.depth(), hi = input.height(), wi = input.width();
  const Index in_vol = di * hi * wi, out_vol = o.d * o.h * o.w;
  const T count = static_cast<T>(params.kernel.d * params.kernel.h * params.kernel.w);
  Tensor<T> out(Shape{input.batch(), input.channels(), o.d, o.h, o.w});
  const T* src = input.data().data();
  T* dst = out.data().data();
#pragma omp parallel for schedule(static)
  for (Index plane = 0; plane < planes; ++plane) {
    const Index base = plane * in_vol;
    for (Index od = 0; od < o.d; ++od) {
      for (Index oh = 0; oh < o.h; ++oh) {
        for (Index ow = 0; ow < o.w; ++ow) {
          T sum = T(0);
          for (Index a = 0; a < params.kernel.d; ++a) {
            const Index z = od * params.stride.d + a;
            for (Index b = 0; b < params.kernel.h; ++b) {
              const Index y = oh * params.stride.h + b;
              const Index row = base + (z * hi + y) * wi + ow * params.stride.w;
              for (Index c = 0; c < params.kernel.w; ++c) sum += src[row + c];
            }
          }
          dst[plane * out_vol + (od * o.h + oh) * o.w + ow] = sum / count;
        }
      }
    }
  }
  return out;
}

template <std::floating_point T>
Tensor<T> batchnorm(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta, BatchNormState<T>& state,
                    NormMode mode, BatchNormCache<T>* cache) {
  require_rank5(input, "batchnorm input");
  const Index channels = input.channels();
  check_bias_like(gamma, channels, "batchnorm gamma");
  check_bias_like(beta, channels, "batchnorm beta");
  if (!(state.epsilon > T(0))) throw ConfigError("batchnorm epsilon must be positive");
  if (static_cast<Index>(state.running_mean.size()) != channels ||
      static_cast<Index>(state.running_var.size()) != channels) {
    throw DimensionError("batchnorm running statistics have the wrong channel count");
  }
  const Index batch = input.batch();
  const Index vol = input.spatial_volume();
  const Index count = batch * vol;
  if (count < 1) throw GeometryError("batchnorm over zero spatial volume");

  Tensor<T> out(input.shape());
  std::vector<T> mean(static_cast<std::size_t>(channels));
  std::vector<T> stddev(static_cast<std::size_t>(channels));
  const T* x = input.data().data();
  T* y = out.data().data();

#pragma omp parallel for schedule(static)
  for (Index c = 0; c < channels; ++c) {
    T m, var;
    if (mode == NormMode::train) {
      T sum = T(0);
      for (Index n = 0; n < batch; ++n) {
        const T* p = x + (n * channels + c) * vol;
        for (Index i = 0; i < vol; ++i) sum += p[i];
      }
      m = sum / static_cast<T>(count);
      T sq = T(0);
      for (Index n = 0; n < batch; ++n) {
        const T* p = x + (n * channels + c) * vol;
        for (Index i = 0; i < vol; ++i) {
          const T d = p[i] - m;
          sq += d * d;
        }
      }
      var = sq / static_cast<T>(count);
    } else {
      m = state.running_mean[static_cast<std::size_t>(c)];
      var = state.running_var[static_cast<std::size_t>(c)];
    }
    const T sd = std::sqrt(var + state.epsilon);
    const T g = gamma[c], b = beta[c];
    for (Index n = 0; n < batch; ++n) {
      const Index off = (n * channels + c) * vol;
      for (Index i = 0; i < vol; ++i) y[off + i] = g * ((x[off + i] - m) / sd) + b;
    }
    mean[static_cast<std::size_t>(c)] = m;
    stddev[static_cast<std::size_t>(c)] = sd;
    if (mode == NormMode::train) {
      auto& rm = state.running_mean[static_cast<std::size_t>(c)];
      auto& rv = state.running_var[static_cast<std::size_t>(c)];
      rm = state.momentum * rm + (T(1) - state.momentum) * m;
      rv = state.momentum * rv + (T(1) - state.momentum) * var;
    }
  }

  if (cache) {
    cache->mode = mode;
    cache->normalized = Tensor<T>(input.shape());
    T* xh = cache->normalized.data().data();
#pragma omp parallel for schedule(static)
    for (Index c = 0; c < channels; ++c) {
      const T m = mean[static_cast<std::size_t>(c)], sd = stddev[static_cast<std::size_t>(c)];
      for (Index n = 0; n < batch; ++n) {
        const Index off = (n * channels + c) * vol;
        for (Index i = 0; i < vol; ++i) xh[off + i] = (x[off + i] - m) / sd;
      }
    }
    cache->mean = std::move(mean);
    cache->stddev = std::move(stddev);
  }
  return out;
}

template <std::floating_point T>
Tensor<T> relu(const Tensor<T>& input) {
  Tensor<T> out(input.shape());
  const T* x = input.data().data();
  T* y = out.data().data();
  const Index n = input.size();
#pragma omp parallel for schedule(static)
  for (Index i = 0; i < n; ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
  return out;
}

template <std::floating_point T>
Tensor<T> sigmoid(const Tensor<T>& input) {
  Tensor<T> out(input.shape());
  const T* x = input.data().data();
  T* y = out.data().data();
  const Index n = input.size();
#pragma omp parallel for schedule(static)
  for (Index i = 0; i < n; ++i) y[i] = stable_sigmoid(x[i]);
  return out;
}

template <std::floating_point T>
Tensor<T> concat_channels(std::span<const Tensor<T>* const> inputs) {
  if (inputs.empty()) throw DimensionError("concat_channels needs at least one input");
  const Tensor<T>& first = *inputs.front();
  require_rank5(first, "concat_channels input");
  Index total = 0;
  for (const Tensor<T>* t : inputs) {
    require_rank5(*t, "concat_channels input");
    if (t->batch() != first.batch()) throw DimensionError("concat_channels batch axis mismatch");
    if (t->depth() != first.depth()) throw DimensionError("concat_channels depth axis mismatch");
    if (t->height() != first.height()) throw DimensionError("concat_channels height axis mismatch");
    if (t->width() != first.width()) throw DimensionError("concat_channels width axis mismatch");
    total += t->channels();
  }
  const Index batch = first.batch(), vol = first.spatial_volume();
  Tensor<T> out(Shape{batch, total, first.depth(), first.height(), first.width()});
  T* dst = out.data().data();
  for (Index n = 0; n < batch; ++n) {
    Index c0 = 0;
    for (const Tensor<T>* t : inputs) {
      const Index chunk = t->channels() * vol;
      const T* src = t->data().data() + n * chunk;
      std::copy(src, src + chunk, dst + (n * total + c0) * vol);
      c0 += t->channels();
    }
  }
  return out;
}

template <std::floating_point T>
Tensor<T> slice_channels(const Tensor<T>& input, Index begin, Index count) {
  require_rank5(input, "slice_channels input");
  if (begin < 0 || count < 1 || begin + count > input.channels()) {
    throw DimensionError("slice_channels range [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                         ") outside channel axis of extent " + std::to_string(input.channels()));
  }
  const Index vol = input.spatial_volume();
  Tensor<T> out(Shape{input.batch(), count, input.depth(), input.height(), input.width()});
  for (Index n = 0; n < input.batch(); ++n) {
    const T* src = input.data().data() + (n * input.channels() + begin) * vol;
    std::copy(src, src + count * vol, out.data().data() + n * count * vol);
  }
  return out;
}

template <std::floating_point T>
ConvGradients<T> conv3d_backward(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& grad_output,
                                 const ConvParams& params) {
  Tensor<T> zero_bias(Shape{params.out_channels});
  check_conv_operands(input, weights, zero_bias, params);
  const ConvGeometry g = make_geometry(input.shape(), params);
  const Shape expected{g.batch, g.cout, g.dout, g.hout, g.wout};
  if (grad_output.shape() != expected) {
    throw DimensionError("conv3d_backward gradient shape " + shape_string(grad_output.shape()) + " expected " +
                         shape_string(expected));
  }
  ConvGradients<T> r{Tensor<T>(input.shape()), Tensor<T>(weights.shape()), Tensor<T>(Shape{g.cout})};
  const T* go = grad_output.data().data();

  // Bias: sum over batch then positions.
  {
    T* db = r.bias.data().data();
#pragma omp parallel for schedule(static)
    for (Index o = 0; o < g.cout; ++o) {
      T s = T(0);
      for (Index n = 0; n < g.batch; ++n) {
        const T* p = go + (n * g.cout + o) * g.positions;
        for (Index j = 0; j < g.positions; ++j) s += p[j];
      }
      db[o] = s;
    }
  }

  // Transposed weights for the input-gradient GEMM: wt[k][o].
  std::vector<T> wt(static_cast<std::size_t>(g.k_total * g.cout));
  const T* w = weights.data().data();
  for (Index o = 0; o < g.cout; ++o)
    for (Index k = 0; k < g.k_total; ++k) wt[static_cast<std::size_t>(k * g.cout + o)] = w[o * g.k_total + k];

  const Index tiles = (g.positions + kTile - 1) / kTile;
  std::vector<T> col(static_cast<std::size_t>(g.k_total * kTile));
  std::vector<T> gtile(static_cast<std::size_t>(g.cout * kTile));
  std::vector<T> dcol(static_cast<std::size_t>(g.k_total * kTile));
  T* dw = r.weights.data().data();
  T* dx_base = r.input.data().data();

  for (Index n = 0; n < g.batch; ++n) {
    const T* in = input.data().data() + n * g.cin * g.in_volume;
    const T* gout = go + n * g.cout * g.positions;
    T* dx = dx_base + n * g.cin * g.in_volume;
    for (Index t = 0; t < tiles; ++t) {
      const Index p0 = t * kTile;
      const Index count = std::min(kTile, g.positions - p0);
      im2col_tile(in, g, params, p0, count, col.data());
      for (Index o = 0; o < g.cout; ++o)
        std::copy(gout + o * g.positions + p0, gout + o * g.positions + p0 + count, gtile.data() + o * count);

      // Weight gradient: each (o, k) owned by one worker, tiles in order.
      const T* cp = col.data();
      const T* gp = gtile.data();
#pragma omp parallel for schedule(static)
      for (Index o = 0; o < g.cout; ++o) {
        const T* grow = gp + o * count;
        T* dwo = dw + o * g.k_total;
        for (Index k = 0; k < g.k_total; ++k) {
          const T* crow = cp + k * count;
          T s = T(0);
          for (Index j = 0; j < count; ++j) s += grow[j] * crow[j];
          dwo[k] += s;
        }
      }

      // Input gradient: dcol = W^T * gtile, then scatter per channel.
      const Index kb = (g.k_total + kRowBlock - 1) / kRowBlock;
#pragma omp parallel for schedule(static)
      for (Index blk = 0; blk < kb; ++blk) {
        const Index r0 = blk * kRowBlock;
        gemm_rows(wt.data(), g.cout, gp, count, count, dcol.data(), count, r0, std::min(g.k_total, r0 + kRowBlock));
      }
      const T* dc = dcol.data();
#pragma omp parallel for schedule(static)
      for (Index ci = 0; ci < g.cin; ++ci) col2im_channel(dc, g, params, p0, count, ci, dx + ci * g.in_volume);
    }
  }
  return r;
}

template <std::floating_point T>
Tensor<T> maxpool3d_backward(const Tensor<T>& grad_output, std::span<const Index> argmax, const Shape& input_shape) {
  if (static_cast<Index>(argmax.size()) != grad_output.size()) {
    throw DimensionError("maxpool3d_backward argmax map does not match gradient size");
  }
  Tensor<T> dx(input_shape);
  const Index planes = input_shape[0] * input_shape[1];
  const Index out_vol = grad_output.size() / planes;
  const T* g = grad_output.data().data();
  T* d = dx.data().data();
  // Windows never straddle planes, so planes are independent.
#pragma omp parallel for schedule(static)
  for (Index plane = 0; plane < planes; ++plane) {
    for (Index i = plane * out_vol; i < (plane + 1) * out_vol; ++i) d[argmax[static_cast<std::size_t>(i)]] += g[i];
  }
  return dx;
}

template <std::floating_point T>
Tensor<T> avgpool3d_backward(const Tensor<T>& grad_output, const Shape& input_shape, const PoolParams& params) {
  Tensor<T> dx(input_shape);
  const Extent3 in = spatial_extent(input_shape);
  const Extent3 o = params.output_extent(in);
  const Index planes = input_shape[0] * input_shape[1];
  const Index in_vol = in.d * in.h * in.w, out_vol = o.d * o.h * o.w;
  const T count = static_cast<T>(params.kernel.d * params.kernel.h * params.kernel.w);
  const T* g = grad_output.data().data();
  T* d = dx.data().data();
#pragma omp parallel for schedule(static)
  for (Index plane = 0; plane < planes; ++plane) {
    for (Index od = 0; od < o.d; ++od)
      for (Index oh = 0; oh < o.h; ++oh)
        for (Index ow = 0; ow < o.w; ++ow) {
          const T share = g[plane * out_vol + (od * o.h + oh) * o.w + ow] / count;
          for (Index a = 0; a < params.kernel.d; ++a)
            for (Index b = 0; b < params.kernel.h; ++b)
              for (Index c = 0; c < params.kernel.w; ++c) {
                const Index z = od * params.stride.d + a, y = oh * params.stride.h + b, x = ow * params.stride.w + c;
                d[plane * in_vol + (z * in.h + y) * in.w + x] += share;
              }
        }
  }
  return dx;
}

template <std::floating_point T>
BatchNormGradients<T> batchnorm_backward(const Tensor<T>& grad_output, const Tensor<T>& gamma,
                                         const BatchNormCache<T>& cache) {
  const Tensor<T>& xh = cache.normalized;
  if (grad_output.shape() != xh.shape()) throw DimensionError("batchnorm_backward gradient shape mismatch");
  const Index batch = xh.batch(), channels = xh.channels(), vol = xh.spatial_volume();
  const T count = static_cast<T>(batch * vol);
  BatchNormGradients<T> r{Tensor<T>(xh.shape()), Tensor<T>(Shape{channels}), Tensor<T>(Shape{channels})};
  const T* g = grad_output.data().data();
  const T* x = xh.data().data();
  T* dx = r.input.data().data();
#pragma omp parallel for schedule(static)
  for (Index c = 0; c < channels; ++c) {
    T sum_g = T(0), sum_gx = T(0);
    for (Index n = 0; n < batch; ++n) {
      const Index off = (n * channels + c) * vol;
      for (Index i = 0; i < vol; ++i) {
        sum_g += g[off + i];
        sum_gx += g[off + i] * x[off + i];
      }
    }
    r.gamma[c] = sum_gx;
    r.beta[c] = sum_g;
    const T scale = gamma[c] / cache.stddev[static_cast<std::size_t>(c)];
    if (cache.mode == NormMode::train) {
      const T mean_g = sum_g / count, mean_gx = sum_gx / count;
      for (Index n = 0; n < batch; ++n) {
        const Index off = (n * channels + c) * vol;
        for (Index i = 0; i < vol; ++i) dx[off + i] = scale * (g[off + i] - mean_g - x[off + i] * mean_gx);
      }
    } else {
      for (Index n = 0; n < batch; ++n) {
        const Index off = (n * channels + c) * vol;
        for (Index i = 0; i < vol; ++i) dx[off + i] = scale * g[off + i];
      }
    }
  }
  return r;
}

template <std::floating_point T>
Tensor<T> relu_backward(const Tensor<T>& grad_output, const Tensor<T>& input) {
  if (grad_output.shape() != input.shape()) throw DimensionError("relu_backward shape mismatch");
  Tensor<T> dx(input.shape());
  const Index n = input.size();
  for (Index i = 0; i < n; ++i) dx[i] = input[i] > T(0) ? grad_output[i] : T(0);
  return dx;
}

template <std::floating_point T>
Tensor<T> sigmoid_backward(const Tensor<T>& grad_output, const Tensor<T>& output) {
  if (grad_output.shape() != output.shape()) throw DimensionError("sigmoid_backward shape mismatch");
  Tensor<T> dx(output.shape());
  const Index n = output.size();
  for (Index i = 0; i < n; ++i) dx[i] = grad_output[i] * output[i] * (T(1) - output[i]);
  return dx;
}

#define S4ND_INSTANTIATE(T)                                                                                       \
  template Tensor<T> conv3d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const ConvParams&,             \
                            ConvAlgorithm);                                                                       \
  template Tensor<T> conv3d_stride2_downsample(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Extent3);   \
  template MaxPoolResult<T> maxpool3d(const Tensor<T>&, const PoolParams&);                                      \
  template Tensor<T> avgpool3d(const Tensor<T>&, const PoolParams&);                                             \
  template Tensor<T> batchnorm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, BatchNormState<T>&,         \
                               NormMode, BatchNormCache<T>*);                                                     \
  template Tensor<T> relu(const Tensor<T>&);                                                                      \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                                   \
  template Tensor<T> concat_channels(std::span<const Tensor<T>* const>);                                         \
  template Tensor<T> slice_channels(const Tensor<T>&, Index, Index);                                             \
  template ConvGradients<T> conv3d_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,                \
                                            const ConvParams&);                                                   \
  template Tensor<T> maxpool3d_backward(const Tensor<T>&, std::span<const Index>, const Shape&);                 \
  template Tensor<T> avgpool3d_backward(const Tensor<T>&, const Shape&, const PoolParams&);                      \
  template BatchNormGradients<T> batchnorm_backward(const Tensor<T>&, const Tensor<T>&, const BatchNormCache<T>&); \
  template Tensor<T> relu_backward(const Tensor<T>&, const Tensor<T>&);                                          \
  template Tensor<T> sigmoid_backward(const Tensor<T>&, const Tensor<T>&);

S4ND_INSTANTIATE(float)
S4ND_INSTANTIATE(double)

#undef S4ND_INSTANTIATE

}  // namespace s4nd
