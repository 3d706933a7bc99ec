#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

#include "oracles.hpp"
#include "s4nd/autograd.hpp"
#include "s4nd/checkpoint.hpp"
#include "s4nd/gradcheck.hpp"
#include "s4nd/loss_grid.hpp"

using namespace s4nd;

namespace {

ConvParams small_conv() {
  ConvParams p;
  p.in_channels = 2;
  p.out_channels = 2;
  p.kernel = {3, 3, 3};
  p.padding = {1, 1, 1};
  return p;
}

}  // namespace

TEST_CASE("gradient of sum(w * x) is x") {
  std::mt19937_64 rng(1);
  auto x = oracle::random_tensor({1, 2, 2, 2, 2}, rng);
  Parameter<double> w("w", oracle::random_tensor({1, 2, 2, 2, 2}, rng));
  Tape<double> tape;
  Var loss = ag::sum(tape, ag::mul(tape, tape.parameter(w), tape.constant(x)));
  tape.backward(loss);
  CHECK(w.grad == x);
}

TEST_CASE("conv3d gradients match central differences") {
  std::mt19937_64 rng(2);
  const ConvParams p = small_conv();
  auto x = oracle::random_tensor({1, 2, 3, 4, 4}, rng);
  auto w = oracle::random_tensor(p.weight_shape(), rng);
  auto b = oracle::random_tensor({2}, rng);
  auto proj = oracle::random_tensor({1, 2, 3, 4, 4}, rng);

  Parameter<double> px("x", x), pw("w", w), pb("b", b);
  Tape<double> tape;
  tape.backward(ag::weighted_sum(tape, ag::conv3d(tape, tape.parameter(px), tape.parameter(pw), tape.parameter(pb), p), proj));

  auto loss_of = [&](const Tensor<double>& xx, const Tensor<double>& ww, const Tensor<double>& bb) {
    auto y = oracle::conv3d(xx, ww, {bb[0], bb[1]}, {3, 3, 3, 1, 1, 1, 1, 1, 1});
    double s = 0;
    for (Index i = 0; i < y.size(); ++i) s += y[i] * proj[i];
    return s;
  };
  double worst = 0;
  for (Index i = 0; i < x.size(); ++i)
    worst = std::max(worst, oracle::rel_error(px.grad[i], oracle::central_difference(
                                                              [&](const Tensor<double>& t) { return loss_of(t, w, b); }, x, i, 1e-5)));
  for (Index i = 0; i < w.size(); ++i)
    worst = std::max(worst, oracle::rel_error(pw.grad[i], oracle::central_difference(
                                                              [&](const Tensor<double>& t) { return loss_of(x, t, b); }, w, i, 1e-5)));
  for (Index i = 0; i < b.size(); ++i)
    worst = std::max(worst, oracle::rel_error(pb.grad[i], oracle::central_difference(
                                                              [&](const Tensor<double>& t) { return loss_of(x, w, t); }, b, i, 1e-5)));
  CHECK(worst < 1e-6);
}

TEST_CASE("elementary gradient checks") {
  for (const auto& r : run_operation_gradchecks(3)) {
    INFO(r.name);
    CHECK(r.worst() < 1e-6);
    if (r.name == "relu" || r.name == "sigmoid_bce") CHECK(r.worst() < 1e-7);
    if (r.name == "batchnorm_train") CHECK(r.worst() < 1e-5);
  }
}

TEST_CASE("a corrupted convolution backward is caught") {
  std::mt19937_64 rng(4);
  const ConvParams p = small_conv();
  auto proj = oracle::random_tensor({1, 2, 3, 4, 4}, rng);
  auto faulty = [&](Tape<double>& t, std::span<const Var> v) {
    Var in = v[0], w = v[1], b = v[2];
    Tensor<double> out = conv3d(t.value(in), t.value(w), t.value(b), p);
    Var y = t.record(std::move(out), {in, w, b}, [=](Tape<double>& tt, const Tensor<double>& g) {
      auto grads = conv3d_backward(tt.value(in), tt.value(w), g, p);
      for (Index i = 0; i < grads.weights.size(); ++i) grads.weights[i] *= 1.01;
      tt.accumulate(in, grads.input);
      tt.accumulate(w, grads.weights);
      tt.accumulate(b, grads.bias);
    });
    return ag::weighted_sum(t, y, proj);
  };
  auto r = grad_check("faulty_conv",
                      {oracle::random_tensor({1, 2, 3, 4, 4}, rng), oracle::random_tensor(p.weight_shape(), rng),
                       oracle::random_tensor({2}, rng)},
                      {"input", "weights", "bias"}, faulty);
  CHECK_FALSE(r.passed(1e-6));
  CHECK(r.max_rel_error[0] < 1e-6);
  CHECK(r.max_rel_error[1] > 1e-3);
}

TEST_CASE("concat backward routes slices unchanged") {
  std::mt19937_64 rng(5);
  Parameter<double> a("a", oracle::random_tensor({1, 2, 2, 2, 2}, rng));
  Parameter<double> b("b", oracle::random_tensor({1, 3, 2, 2, 2}, rng));
  auto proj = oracle::random_tensor({1, 5, 2, 2, 2}, rng);
  Tape<double> tape;
  std::vector<Var> ins{tape.parameter(a), tape.parameter(b)};
  tape.backward(ag::weighted_sum(tape, ag::concat_channels(tape, std::span<const Var>(ins)), proj));
  CHECK(a.grad == slice_channels(proj, 0, 2));
  CHECK(b.grad == slice_channels(proj, 2, 3));
}

TEST_CASE("maxpool backward deposits only at argmax") {
  std::mt19937_64 rng(6);
  auto x = oracle::random_tensor({1, 2, 2, 4, 4}, rng);
  auto pooled = maxpool3d(x, PoolParams{{1, 2, 2}, {1, 2, 2}});
  auto g = oracle::random_tensor(pooled.output.shape(), rng);
  auto dx = maxpool3d_backward(g, pooled.argmax, x.shape());
  double sum_in = 0, sum_out = 0;
  std::vector<bool> winner(static_cast<std::size_t>(x.size()), false);
  for (Index a : pooled.argmax) winner[static_cast<std::size_t>(a)] = true;
  for (Index i = 0; i < dx.size(); ++i) {
    if (!winner[static_cast<std::size_t>(i)]) CHECK(dx[i] == 0.0);
    sum_in += dx[i];
  }
  for (Index i = 0; i < g.size(); ++i) sum_out += g[i];
  CHECK(sum_in == doctest::Approx(sum_out).epsilon(1e-14));
}

TEST_CASE("input gradient sum equals the all-ones directional derivative") {
  std::mt19937_64 rng(7);
  const ConvParams p = small_conv();
  auto w = oracle::random_tensor(p.weight_shape(), rng);
  Tensor<double> bias(Shape{2}, 0.1);
  Tensor<double> x(Shape{1, 2, 3, 4, 4}, 0.3);
  auto loss = [&](const Tensor<double>& in) {
    Tape<double> t;
    return t.value(ag::sum(t, ag::sigmoid(t, ag::conv3d(t, t.constant(in), t.constant(w), t.constant(bias), p))))[0];
  };
  Parameter<double> px("x", x);
  Tape<double> tape;
  tape.backward(ag::sum(tape, ag::sigmoid(tape, ag::conv3d(tape, tape.parameter(px), tape.constant(w), tape.constant(bias), p))));
  double analytic = 0;
  for (Index i = 0; i < px.grad.size(); ++i) analytic += px.grad[i];
  const double h = 1e-5;
  Tensor<double> up(x.shape(), 0.3 + h), down(x.shape(), 0.3 - h);
  const double numeric = (loss(up) - loss(down)) / (2 * h);
  CHECK(oracle::rel_error(analytic, numeric) < 1e-8);
}

TEST_CASE("backward state errors") {
  Tape<double> empty;
  CHECK_THROWS_AS(empty.backward(Var{0}), StateError);

  Parameter<double> w("w", Tensor<double>(Shape{3}, 1.0));
  Tape<double> tape;
  Var loss = ag::sum(tape, tape.parameter(w));
  tape.backward(loss);
  CHECK_THROWS_AS(tape.backward(loss), StateError);

  Tape<double> kept;
  kept.keep_gradients(true);
  Var l2 = ag::sum(kept, kept.parameter(w));
  kept.backward(l2);
  CHECK_THROWS_AS(kept.backward(l2), StateError);

  Tape<double> not_scalar;
  Var v = not_scalar.parameter(w);
  CHECK_THROWS_AS(not_scalar.backward(v), DimensionError);
}

TEST_CASE("sgd step arithmetic") {
  Parameter<double> w("w", Tensor<double>(Shape{1}, 1.0));
  w.grad[0] = 0.5;
  std::vector<Tensor<double>> vel{Tensor<double>(Shape{1})};
  std::vector<Parameter<double>*> ps{&w};
  sgd_step<double>(ps, vel, 0.1, 0.0, 0.0);
  CHECK(w.value[0] == doctest::Approx(0.95).epsilon(1e-15));
  CHECK(w.grad[0] == 0.0);

  sgd_step<double>(ps, vel, 0.1, 0.0, 0.0);
  CHECK(w.value[0] == doctest::Approx(0.95).epsilon(1e-15));

  CHECK_THROWS_AS(sgd_step<double>(ps, vel, 0.0, 0.9, 0.0), ConfigError);
  CHECK_THROWS_AS(sgd_step<double>(ps, vel, -1.0, 0.9, 0.0), ConfigError);
}

TEST_CASE("sgd momentum reproduces the hand-unrolled recurrence") {
  // w0 = 2, g1 = 0.4, g2 = -0.3, lr 0.05, momentum 0.9, wd 0.01.
  // v1 = 0.4 + 0.01 * 2 = 0.42              w1 = 2 - 0.05 * 0.42 = 1.979
  // v2 = 0.9 * 0.42 - 0.3 + 0.01 * 1.979 = 0.09779
  // w2 = 1.979 - 0.05 * 0.09779 = 1.9741105
  Parameter<double> w("w", Tensor<double>(Shape{1}, 2.0));
  SgdOptimizer<double> opt(0.9, 0.01);
  std::vector<Parameter<double>*> ps{&w};
  w.grad[0] = 0.4;
  opt.step(ps, 0.05);
  CHECK(w.value[0] == doctest::Approx(1.979).epsilon(1e-14));
  w.grad[0] = -0.3;
  opt.step(ps, 0.05);
  CHECK(w.value[0] == doctest::Approx(1.9741105).epsilon(1e-14));
  CHECK(opt.state().front().second[0] == doctest::Approx(0.09779).epsilon(1e-14));
}

TEST_CASE("step decay schedule") {
  std::vector<int> milestones{120, 170};
  CHECK(step_decay_lr(0.01, 0.1, milestones, 0) == 0.01);
  CHECK(step_decay_lr(0.01, 0.1, milestones, 120) == doctest::Approx(0.001));
  CHECK(step_decay_lr(0.01, 0.1, milestones, 199) == doctest::Approx(0.0001));
}

TEST_CASE("checkpoint round trip and format errors") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "s4nd_ckpt_test";
  fs::create_directories(dir);
  std::mt19937_64 rng(8);
  std::vector<CheckpointRecord> recs{{"block1.layer1.conv.weight", oracle::random_tensor({4, 2, 3, 3, 3}, rng)},
                                     {"head.bias", Tensor<double>(Shape{1}, -4.0)}};
  recs[0].value[3] = -0.0;
  const fs::path path = dir / "a.ckpt";
  write_checkpoint(path, recs);
  CHECK_FALSE(fs::exists(dir / "a.ckpt.partial"));
  auto back = read_checkpoint(path);
  REQUIRE(back.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(back[i].name == recs[i].name);
    CHECK(back[i].value.shape() == recs[i].value.shape());
    CHECK(std::memcmp(back[i].value.data().data(), recs[i].value.data().data(),
                      sizeof(double) * static_cast<std::size_t>(recs[i].value.size())) == 0);
  }
  {
    std::ofstream f(dir / "bad.ckpt", std::ios::binary);
    f << "NOTACKPT";
  }
  CHECK_THROWS_AS(read_checkpoint(dir / "bad.ckpt"), FormatError);
  {
    std::ifstream in(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), {});
    std::ofstream f(dir / "short.ckpt", std::ios::binary);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 5));
  }
  CHECK_THROWS_AS(read_checkpoint(dir / "short.ckpt"), FormatError);
  fs::remove_all(dir);
}
