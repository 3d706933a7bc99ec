#include "s4nd/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "s4nd/loss_grid.hpp"

namespace s4nd {

double GradCheckResult::worst() const {
  double w = 0.0;
  for (double e : max_rel_error) w = std::max(w, e);
  return w;
}

double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-8});
}

namespace {

double evaluate(const std::vector<Tensor<double>>& inputs, const LossBuilder& build) {
  Tape<double> tape;
  std::vector<Var> vars;
  for (const auto& t : inputs) vars.push_back(tape.constant(t));
  return tape.value(build(tape, vars))[0];
}

}  // namespace

GradCheckResult grad_check(std::string name, std::vector<Tensor<double>> inputs, std::vector<std::string> input_names,
                           const LossBuilder& build, const GradCheckOptions& options) {
  GradCheckResult result;
  result.name = std::move(name);
  result.inputs = std::move(input_names);
  result.inputs.resize(inputs.size());

  // Analytic gradients: inputs enter the tape as parameters.
  std::vector<Parameter<double>> params;
  params.reserve(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) params.emplace_back(result.inputs[i], inputs[i]);
  {
    Tape<double> tape;
    std::vector<Var> vars;
    for (auto& p : params) vars.push_back(tape.parameter(p));
    tape.backward(build(tape, vars));
  }

  std::mt19937_64 rng(options.seed);
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    std::vector<Index> which(static_cast<std::size_t>(inputs[i].size()));
    std::iota(which.begin(), which.end(), Index{0});
    if (options.samples_per_input > 0 && options.samples_per_input < inputs[i].size()) {
      std::shuffle(which.begin(), which.end(), rng);
      which.resize(static_cast<std::size_t>(options.samples_per_input));
    }
    double worst = 0.0;
    for (Index e : which) {
      const double orig = inputs[i][e];
      inputs[i][e] = orig + options.eps;
      const double up = evaluate(inputs, build);
      inputs[i][e] = orig - options.eps;
      const double down = evaluate(inputs, build);
      inputs[i][e] = orig;
      const double numeric = (up - down) / (2.0 * options.eps);
      worst = std::max(worst, relative_error(params[i].grad[e], numeric));
    }
    result.max_rel_error.push_back(worst);
    result.checked.push_back(static_cast<Index>(which.size()));
  }
  return result;
}

namespace {

Tensor<double> uniform(Shape shape, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor<double> t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = dist(rng);
  return t;
}

// Values bounded away from zero: |x| in [margin, 1].
Tensor<double> away_from_zero(Shape shape, std::mt19937_64& rng, double margin) {
  Tensor<double> t = uniform(std::move(shape), rng, margin, 1.0);
  std::bernoulli_distribution sign(0.5);
  for (Index i = 0; i < t.size(); ++i)
    if (sign(rng)) t[i] = -t[i];
  return t;
}

// Distinct values with pairwise gaps of 0.01 in random order, so no pooling
// window can change its winner under a 1e-5 perturbation.
Tensor<double> well_separated(Shape shape, std::mt19937_64& rng) {
  Tensor<double> t(std::move(shape));
  std::vector<double> v(static_cast<std::size_t>(t.size()));
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = 0.01 * static_cast<double>(i) - 0.5;
  std::shuffle(v.begin(), v.end(), rng);
  for (Index i = 0; i < t.size(); ++i) t[i] = v[static_cast<std::size_t>(i)];
  return t;
}

ConvParams make_conv(Index cin, Index cout, Extent3 k, Extent3 s, Extent3 p) {
  ConvParams c;
  c.in_channels = cin;
  c.out_channels = cout;
  c.kernel = k;
  c.stride = s;
  c.padding = p;
  return c;
}

}  // namespace

std::vector<GradCheckResult> run_operation_gradchecks(std::uint64_t seed, double eps) {
  std::mt19937_64 rng(seed);
  std::vector<GradCheckResult> out;
  GradCheckOptions opt;
  opt.eps = eps;
  opt.seed = seed;

  {
    const ConvParams p = make_conv(2, 3, {3, 3, 3}, {1, 1, 1}, {1, 1, 1});
    auto proj = uniform({1, 3, 3, 4, 4}, rng, -1, 1);
    out.push_back(grad_check(
        "conv3d", {uniform({1, 2, 3, 4, 4}, rng, -1, 1), uniform(p.weight_shape(), rng, -1, 1), uniform({3}, rng, -1, 1)},
        {"input", "weights", "bias"},
        [=](Tape<double>& t, std::span<const Var> v) { return ag::weighted_sum(t, ag::conv3d(t, v[0], v[1], v[2], p), proj); },
        opt));
  }
  {
    const ConvParams p = make_conv(2, 2, {3, 3, 3}, {1, 2, 2}, {1, 1, 1});
    auto proj = uniform({1, 2, 2, 3, 3}, rng, -1, 1);
    out.push_back(grad_check(
        "conv3d_stride2", {uniform({1, 2, 2, 6, 6}, rng, -1, 1), uniform(p.weight_shape(), rng, -1, 1), uniform({2}, rng, -1, 1)},
        {"input", "weights", "bias"},
        [=](Tape<double>& t, std::span<const Var> v) { return ag::weighted_sum(t, ag::conv3d(t, v[0], v[1], v[2], p), proj); },
        opt));
  }
  {
    const PoolParams p{{1, 2, 2}, {1, 2, 2}};
    auto proj = uniform({1, 2, 2, 2, 2}, rng, -1, 1);
    out.push_back(grad_check(
        "maxpool3d", {well_separated({1, 2, 2, 4, 4}, rng)}, {"input"},
        [=](Tape<double>& t, std::span<const Var> v) { return ag::weighted_sum(t, ag::maxpool3d(t, v[0], p), proj); }, opt));
  }
  {
    const PoolParams p{{2, 2, 2}, {1, 2, 2}};
    auto proj = uniform({1, 2, 2, 2, 2}, rng, -1, 1);
    out.push_back(grad_check(
        "avgpool3d", {uniform({1, 2, 3, 4, 4}, rng, -1, 1)}, {"input"},
        [=](Tape<double>& t, std::span<const Var> v) { return ag::weighted_sum(t, ag::avgpool3d(t, v[0], p), proj); }, opt));
  }
  {
    auto proj = uniform({2, 3, 2, 3, 3}, rng, -1, 1);
    out.push_back(grad_check(
        "batchnorm_train",
        {uniform({2, 3, 2, 3, 3}, rng, -2, 2), uniform({3}, rng, 0.5, 1.5), uniform({3}, rng, -0.5, 0.5)},
        {"input", "gamma", "beta"},
        [=](Tape<double>& t, std::span<const Var> v) {
          BatchNormState<double> state(3);
          return ag::weighted_sum(t, ag::batchnorm(t, v[0], v[1], v[2], state, NormMode::train), proj);
        },
        opt));
  }
  {
    auto proj = uniform({1, 2, 2, 3, 3}, rng, -1, 1);
    out.push_back(grad_check(
        "relu", {away_from_zero({1, 2, 2, 3, 3}, rng, std::max(0.1, 10 * eps))}, {"input"},
        [=](Tape<double>& t, std::span<const Var> v) { return ag::weighted_sum(t, ag::relu(t, v[0]), proj); }, opt));
  }
  {
    auto proj = uniform({1, 2, 2, 3, 3}, rng, -1, 1);
    out.push_back(grad_check(
        "sigmoid", {uniform({1, 2, 2, 3, 3}, rng, -4, 4)}, {"input"},
        [=](Tape<double>& t, std::span<const Var> v) { return ag::weighted_sum(t, ag::sigmoid(t, v[0]), proj); }, opt));
  }
  {
    auto proj = uniform({1, 5, 2, 2, 2}, rng, -1, 1);
    out.push_back(grad_check(
        "concat_channels", {uniform({1, 2, 2, 2, 2}, rng, -1, 1), uniform({1, 3, 2, 2, 2}, rng, -1, 1)}, {"a", "b"},
        [=](Tape<double>& t, std::span<const Var> v) {
          return ag::weighted_sum(t, ag::concat_channels(t, v), proj);
        },
        opt));
  }
  {
    Tensor<double> labels(Shape{1, 1, 2, 3, 3});
    std::bernoulli_distribution coin(0.3);
    for (Index i = 0; i < labels.size(); ++i) labels[i] = coin(rng) ? 1.0 : 0.0;
    labels[0] = 1.0;
    BceOptions bce;
    bce.pos_weight = 3.0;
    out.push_back(grad_check(
        "sigmoid_bce", {uniform({1, 1, 2, 3, 3}, rng, -3, 3)}, {"logits"},
        [=](Tape<double>& t, std::span<const Var> v) { return weighted_bce(t, ag::sigmoid(t, v[0]), labels, bce); },
        opt));
  }
  return out;
}

}  // namespace s4nd
