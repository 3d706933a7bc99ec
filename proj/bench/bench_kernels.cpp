// Optimized (im2col, OpenMP) kernels against the serial reference loops.

#include <benchmark/benchmark.h>

#include <random>

#include "s4nd/kernels.hpp"
#include "s4nd/parallel.hpp"
#include "s4nd/reference.hpp"

using namespace s4nd;

namespace {

Tensor<double> random_tensor(Shape shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Tensor<double> t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = u(rng);
  return t;
}

// Shapes of a dense-block layer of the small detector: 24 -> 8 channels
// on a 16x32x32 volume, and a transition-sized pooling input.
struct ConvCase {
  Tensor<double> x = random_tensor({2, 24, 8, 32, 32}, 1);
  Tensor<double> w = random_tensor({8, 24, 3, 3, 3}, 2);
  Tensor<double> b = random_tensor({8}, 3);
  ConvParams p = [] {
    ConvParams c;
    c.in_channels = 24;
    c.out_channels = 8;
    c.padding = {1, 1, 1};
    return c;
  }();
};

void BM_conv3d_im2col(benchmark::State& state) {
  set_thread_count(static_cast<int>(state.range(0)));
  ConvCase c;
  for (auto _ : state) benchmark::DoNotOptimize(conv3d(c.x, c.w, c.b, c.p, ConvAlgorithm::im2col));
}

void BM_conv3d_reference(benchmark::State& state) {
  ConvCase c;
  for (auto _ : state) benchmark::DoNotOptimize(reference::conv3d(c.x, c.w, c.b, c.p));
}

void BM_conv3d_backward(benchmark::State& state) {
  set_thread_count(static_cast<int>(state.range(0)));
  ConvCase c;
  const Tensor<double> g = random_tensor(conv3d(c.x, c.w, c.b, c.p).shape(), 4);
  for (auto _ : state) benchmark::DoNotOptimize(conv3d_backward(c.x, c.w, g, c.p));
}

void BM_maxpool3d(benchmark::State& state) {
  set_thread_count(static_cast<int>(state.range(0)));
  const Tensor<double> x = random_tensor({2, 64, 8, 32, 32}, 5);
  for (auto _ : state) benchmark::DoNotOptimize(maxpool3d(x, PoolParams{}));
}

void BM_maxpool3d_reference(benchmark::State& state) {
  const Tensor<double> x = random_tensor({2, 64, 8, 32, 32}, 5);
  for (auto _ : state) benchmark::DoNotOptimize(reference::maxpool3d(x, PoolParams{}));
}

void BM_batchnorm(benchmark::State& state) {
  set_thread_count(static_cast<int>(state.range(0)));
  const Tensor<double> x = random_tensor({2, 64, 8, 32, 32}, 6);
  const Tensor<double> g(Shape{64}, 1.0), b(Shape{64}, 0.0);
  BatchNormState<double> s(64);
  for (auto _ : state) benchmark::DoNotOptimize(batchnorm(x, g, b, s, NormMode::train));
}

void BM_batchnorm_reference(benchmark::State& state) {
  const Tensor<double> x = random_tensor({2, 64, 8, 32, 32}, 6);
  const Tensor<double> g(Shape{64}, 1.0), b(Shape{64}, 0.0);
  for (auto _ : state) benchmark::DoNotOptimize(reference::batchnorm_train(x, g, b, 1e-5));
}

}  // namespace

BENCHMARK(BM_conv3d_im2col)->Arg(1)->Arg(2)->Arg(4)->UseRealTime()->Unit(benchmark::kMillisecond);
BENCHMARK(BM_conv3d_reference)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_conv3d_backward)->Arg(1)->Arg(4)->UseRealTime()->Unit(benchmark::kMillisecond);
BENCHMARK(BM_maxpool3d)->Arg(1)->Arg(4)->UseRealTime()->Unit(benchmark::kMillisecond);
BENCHMARK(BM_maxpool3d_reference)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_batchnorm)->Arg(1)->Arg(4)->UseRealTime()->Unit(benchmark::kMillisecond);
BENCHMARK(BM_batchnorm_reference)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
