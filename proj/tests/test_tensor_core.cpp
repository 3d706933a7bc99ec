#include <doctest.h>

#include <random>

#include "oracles.hpp"
#include "s4nd/kernels.hpp"
#include "s4nd/parallel.hpp"
#include "s4nd/reference.hpp"

using namespace s4nd;

namespace {

Tensor<double> vec(std::vector<double> v) {
  const Index n = static_cast<Index>(v.size());
  return Tensor<double>(Shape{n}, std::move(v));
}

ConvParams conv_params(Index cin, Index cout, Extent3 k, Extent3 s, Extent3 p) {
  ConvParams cp;
  cp.in_channels = cin;
  cp.out_channels = cout;
  cp.kernel = k;
  cp.stride = s;
  cp.padding = p;
  return cp;
}

}  // namespace

TEST_CASE("tensor shape invariants") {
  Tensor<double> t(Shape{2, 3, 4, 5, 6});
  CHECK(t.size() == 720);
  CHECK_THROWS_AS(Tensor<double>(Shape{2, 0, 3}), DimensionError);
  CHECK_THROWS_AS(Tensor<double>(Shape{2, 2}, std::vector<double>(3)), DimensionError);
  for (Index i = 0; i < t.size(); i += 7) {
    Shape c = t.coordinate(i);
    CHECK(t.offset(c) == i);
    CHECK(t.offset5(c[0], c[1], c[2], c[3], c[4]) == i);
  }
}

TEST_CASE("conv3d single multiply and identity kernel") {
  Tensor<double> x(Shape{1, 1, 1, 1, 1}, 3.0);
  Tensor<double> w(Shape{1, 1, 1, 1, 1}, 2.0);
  auto y = conv3d(x, w, vec({0.0}), conv_params(1, 1, {1, 1, 1}, {1, 1, 1}, {0, 0, 0}));
  CHECK(y[0] == 6.0);

  std::mt19937_64 rng(1);
  auto in = oracle::random_tensor({2, 1, 3, 5, 4}, rng);
  auto id = conv3d(in, Tensor<double>(Shape{1, 1, 1, 1, 1}, 1.0), vec({0.0}),
                   conv_params(1, 1, {1, 1, 1}, {1, 1, 1}, {0, 0, 0}));
  CHECK(id == in);
}

TEST_CASE("conv3d matches the seven-loop oracle bit-exactly") {
  std::mt19937_64 rng(42);
  auto x = oracle::random_tensor({1, 2, 3, 4, 4}, rng);
  auto w = oracle::random_tensor({3, 2, 3, 3, 3}, rng);
  std::vector<double> b{0.1, -0.2, 0.3};
  auto p = conv_params(2, 3, {3, 3, 3}, {1, 1, 1}, {1, 1, 1});
  auto expected = oracle::conv3d(x, w, b, {3, 3, 3, 1, 1, 1, 1, 1, 1});
  CHECK(conv3d(x, w, vec(b), p, ConvAlgorithm::im2col) == expected);
  CHECK(conv3d(x, w, vec(b), p, ConvAlgorithm::direct) == expected);
}

TEST_CASE("conv3d errors") {
  Tensor<double> x(Shape{1, 2, 4, 4, 4});
  auto p = conv_params(3, 1, {3, 3, 3}, {1, 1, 1}, {0, 0, 0});
  Tensor<double> w(p.weight_shape());
  try {
    (void)conv3d(x, w, vec({0.0}), p);
    FAIL("expected a dimension error");
  } catch (const DimensionError& e) {
    CHECK(std::string(e.what()).find("channel") != std::string::npos);
  }
  auto big = conv_params(2, 1, {5, 3, 3}, {1, 1, 1}, {0, 0, 0});
  CHECK_THROWS_AS((void)conv3d(x, Tensor<double>(big.weight_shape()), vec({0.0}), big), GeometryError);
  CHECK_THROWS_AS((void)conv3d(x, Tensor<double>(conv_params(2, 1, {3, 3, 3}, {1, 1, 1}, {0, 0, 0}).weight_shape()),
                               vec({0.0, 1.0}), conv_params(2, 1, {3, 3, 3}, {1, 1, 1}, {0, 0, 0})),
                  DimensionError);
}

TEST_CASE("conv3d is linear for zero bias") {
  std::mt19937_64 rng(7);
  auto x = oracle::random_tensor({1, 2, 4, 6, 5}, rng);
  auto y = oracle::random_tensor({1, 2, 4, 6, 5}, rng);
  auto w = oracle::random_tensor({2, 2, 3, 3, 3}, rng);
  auto p = conv_params(2, 2, {3, 3, 3}, {1, 2, 1}, {1, 1, 1});
  const double a = 1.7, b = -0.6;
  Tensor<double> mix(x.shape());
  for (Index i = 0; i < mix.size(); ++i) mix[i] = a * x[i] + b * y[i];
  auto zero = vec({0.0, 0.0});
  auto lhs = conv3d(mix, w, zero, p);
  auto cx = conv3d(x, w, zero, p), cy = conv3d(y, w, zero, p);
  for (Index i = 0; i < lhs.size(); ++i) {
    const double rhs = a * cx[i] + b * cy[i];
    CHECK(std::abs(lhs[i] - rhs) <= 1e-10 * std::max(1.0, std::abs(rhs)));
  }
}

TEST_CASE("conv3d is translation equivariant on the interior") {
  std::mt19937_64 rng(8);
  auto x = oracle::random_tensor({1, 1, 3, 10, 10}, rng);
  auto w = oracle::random_tensor({1, 1, 3, 3, 3}, rng);
  auto p = conv_params(1, 1, {3, 3, 3}, {1, 2, 2}, {1, 1, 1});
  // Shift the input by one stride (2 voxels) along width.
  Tensor<double> shifted(x.shape());
  for (Index d = 0; d < 3; ++d)
    for (Index h = 0; h < 10; ++h)
      for (Index ww = 2; ww < 10; ++ww) shifted.at(0, 0, d, h, ww) = x.at(0, 0, d, h, ww - 2);
  auto a = conv3d(x, w, vec({0.0}), p);
  auto b = conv3d(shifted, w, vec({0.0}), p);
  for (Index d = 0; d < a.depth(); ++d)
    for (Index h = 1; h + 1 < a.height(); ++h)
      for (Index ow = 1; ow + 1 < a.width() - 1; ++ow) CHECK(b.at(0, 0, d, h, ow + 1) == a.at(0, 0, d, h, ow));
}

TEST_CASE("kernels are bit-identical across thread counts") {
  std::mt19937_64 rng(9);
  auto x = oracle::random_tensor({2, 3, 4, 9, 7}, rng);
  auto w = oracle::random_tensor({5, 3, 3, 3, 3}, rng);
  auto b = oracle::random_tensor({5}, rng);
  auto p = conv_params(3, 5, {3, 3, 3}, {1, 1, 1}, {1, 1, 1});
  const int before = thread_count();
  set_thread_count(1);
  auto y1 = conv3d(x, w, b, p);
  auto g = oracle::random_tensor(y1.shape(), rng);
  auto grads1 = conv3d_backward(x, w, g, p);
  set_thread_count(4);
  auto y4 = conv3d(x, w, b, p);
  auto grads4 = conv3d_backward(x, w, g, p);
  set_thread_count(before);
  CHECK(y1 == y4);
  CHECK(grads1.input == grads4.input);
  CHECK(grads1.weights == grads4.weights);
  CHECK(grads1.bias == grads4.bias);
}

TEST_CASE("maxpool3d examples") {
  Tensor<double> c(Shape{1, 2, 2, 4, 4}, 5.0);
  auto r = maxpool3d(c, PoolParams{{1, 2, 2}, {1, 2, 2}});
  for (Index i = 0; i < r.output.size(); ++i) CHECK(r.output[i] == 5.0);

  Tensor<double> x(Shape{1, 1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4});
  auto m = maxpool3d(x, PoolParams{{1, 2, 2}, {1, 2, 2}});
  CHECK(m.output[0] == 4.0);
  CHECK(m.argmax[0] == 3);

  Tensor<double> ties(Shape{1, 1, 1, 2, 2}, 1.0);
  CHECK(maxpool3d(ties, PoolParams{{1, 2, 2}, {1, 2, 2}}).argmax[0] == 0);

  CHECK_THROWS_AS(maxpool3d(x, PoolParams{{1, 3, 3}, {1, 1, 1}}), GeometryError);
}

TEST_CASE("pooling matches the exhaustive window oracle") {
  std::mt19937_64 rng(3);
  auto x = oracle::random_tensor({1, 3, 8, 8, 8}, rng);
  std::vector<Index> arg;
  auto expected = oracle::pool3d(x, 1, 2, 2, 1, 2, 2, 0, &arg);
  auto r = maxpool3d(x, PoolParams{{1, 2, 2}, {1, 2, 2}});
  CHECK(r.output == expected);
  CHECK(r.argmax == arg);
  CHECK(avgpool3d(x, PoolParams{{2, 2, 2}, {2, 1, 2}}) == oracle::pool3d(x, 2, 2, 2, 2, 1, 2, 1));
}

TEST_CASE("avgpool3d examples and max >= avg") {
  Tensor<double> c(Shape{1, 1, 2, 2, 2}, 5.0);
  CHECK(avgpool3d(c, PoolParams{{2, 2, 2}, {2, 2, 2}})[0] == 5.0);
  Tensor<double> x(Shape{1, 1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4});
  CHECK(avgpool3d(x, PoolParams{{1, 2, 2}, {1, 2, 2}})[0] == 2.5);

  std::mt19937_64 rng(5);
  auto r = oracle::random_tensor({2, 2, 4, 6, 6}, rng);
  PoolParams p{{1, 3, 2}, {1, 1, 2}};
  auto mx = maxpool3d(r, p).output;
  auto av = avgpool3d(r, p);
  for (Index i = 0; i < mx.size(); ++i) CHECK(mx[i] >= av[i]);
}

TEST_CASE("batchnorm train normalizes each channel") {
  std::mt19937_64 rng(11);
  auto x = oracle::random_tensor({2, 3, 3, 4, 5}, rng, -5.0, 9.0);
  BatchNormState<double> state(3);
  auto y = batchnorm(x, Tensor<double>(Shape{3}, 1.0), Tensor<double>(Shape{3}, 0.0), state, NormMode::train);
  const Index V = 60;
  for (Index c = 0; c < 3; ++c) {
    double s = 0, q = 0;
    for (Index n = 0; n < 2; ++n)
      for (Index v = 0; v < V; ++v) s += y[(n * 3 + c) * V + v];
    const double mean = s / (2 * V);
    for (Index n = 0; n < 2; ++n)
      for (Index v = 0; v < V; ++v) q += std::pow(y[(n * 3 + c) * V + v] - mean, 2);
    CHECK(std::abs(mean) < 1e-10);
    CHECK(std::abs(q / (2 * V) - 1.0) < 1e-6);
  }
}

TEST_CASE("batchnorm constant channel yields beta") {
  Tensor<double> x(Shape{1, 1, 2, 3, 3}, 4.2);
  BatchNormState<double> state(1);
  auto y = batchnorm(x, vec({1.0}), vec({0.7}), state, NormMode::train);
  for (Index i = 0; i < y.size(); ++i) CHECK(y[i] == doctest::Approx(0.7).epsilon(1e-12));
}

TEST_CASE("batchnorm matches the two-pass oracle and tracks running statistics") {
  std::mt19937_64 rng(12);
  auto x = oracle::random_tensor({2, 4, 2, 3, 3}, rng, -2.0, 3.0);
  std::vector<double> g{0.5, 1.5, -1.0, 2.0}, b{0.1, 0.0, -0.3, 1.0};
  BatchNormState<double> state(4);
  auto y = batchnorm(x, vec(g), vec(b), state, NormMode::train);
  auto expected = oracle::batchnorm(x, g, b, 1e-5);
  double worst = 0;
  for (Index i = 0; i < y.size(); ++i) worst = std::max(worst, std::abs(y[i] - expected[i]));
  CHECK(worst < 1e-12);
  CHECK(y == expected);

  // Running statistics: 0.9 * old + 0.1 * batch.
  double s = 0;
  for (Index n = 0; n < 2; ++n)
    for (Index v = 0; v < 18; ++v) s += x[(n * 4 + 0) * 18 + v];
  CHECK(state.running_mean[0] == doctest::Approx(0.1 * s / 36).epsilon(1e-12));

  auto inferred = batchnorm(x, vec(g), vec(b), state, NormMode::infer);
  const double sd = std::sqrt(state.running_var[1] + 1e-5);
  CHECK(inferred[18 * 1] == doctest::Approx(1.5 * ((x[18] - state.running_mean[1]) / sd)).epsilon(1e-12));
  CHECK_THROWS_AS(batchnorm(x, vec({1.0}), vec(b), state, NormMode::train), DimensionError);
}

TEST_CASE("relu and sigmoid") {
  auto r = relu(Tensor<double>(Shape{3}, std::vector<double>{-1, 0, 2}));
  CHECK(r == Tensor<double>(Shape{3}, std::vector<double>{0, 0, 2}));
  auto s = sigmoid(Tensor<double>(Shape{3}, std::vector<double>{0.0, 1000.0, -1000.0}));
  CHECK(s[0] == 0.5);
  CHECK(s[1] == 1.0);
  CHECK(s[2] == 0.0);
  CHECK(!std::isnan(s[2]));
}

TEST_CASE("concat_channels shapes, identity, slicing and associativity") {
  std::mt19937_64 rng(13);
  auto a = oracle::random_tensor({1, 3, 2, 2, 2}, rng);
  auto b = oracle::random_tensor({1, 5, 2, 2, 2}, rng);
  auto c = oracle::random_tensor({1, 2, 2, 2, 2}, rng);
  auto ab = concat_channels<double>({&a, &b});
  CHECK(ab.shape() == Shape{1, 8, 2, 2, 2});
  CHECK(concat_channels<double>({&a}) == a);
  CHECK(slice_channels(ab, 0, 3) == a);
  CHECK(slice_channels(ab, 3, 5) == b);
  auto left = concat_channels<double>({&ab, &c});
  CHECK(left == concat_channels<double>({&a, &b, &c}));
  auto bad = oracle::random_tensor({1, 1, 2, 3, 2}, rng);
  CHECK_THROWS_AS(concat_channels<double>({&a, &bad}), DimensionError);
}

TEST_CASE("stride-2 downsampling convolution") {
  Tensor<double> ones(Shape{1, 1, 1, 4, 4}, 1.0);
  Tensor<double> w(Shape{1, 1, 3, 3, 3}, 1.0 / 27.0);
  auto y = conv3d_stride2_downsample(ones, w, vec({0.0}), {1, 2, 2});
  CHECK(y.shape() == Shape{1, 1, 1, 2, 2});

  std::mt19937_64 rng(14);
  auto x = oracle::random_tensor({1, 2, 4, 8, 8}, rng);
  auto wr = oracle::random_tensor({3, 2, 3, 3, 3}, rng);
  auto br = oracle::random_tensor({3}, rng);
  auto p = conv_params(2, 3, {3, 3, 3}, {2, 2, 2}, {1, 1, 1});
  auto ds = conv3d_stride2_downsample(x, wr, br, {2, 2, 2});
  CHECK(ds == conv3d(x, wr, br, p));
  CHECK(ds == oracle::conv3d(x, wr, {br[0], br[1], br[2]}, {3, 3, 3, 2, 2, 2, 1, 1, 1}));
}

TEST_CASE("reference kernels agree with optimized kernels") {
  std::mt19937_64 rng(15);
  auto x = oracle::random_tensor({1, 2, 3, 6, 6}, rng);
  PoolParams p{{1, 2, 2}, {1, 2, 2}};
  CHECK(reference::maxpool3d(x, p).output == maxpool3d(x, p).output);
  CHECK(reference::avgpool3d(x, p) == avgpool3d(x, p));
  BatchNormState<double> st(2);
  auto g = vec({1.0, 2.0}), b = vec({0.0, 0.5});
  CHECK(reference::batchnorm_train(x, g, b, 1e-5) == batchnorm(x, g, b, st, NormMode::train));
}
