#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "s4nd/autograd.hpp"

namespace s4nd {

struct GradCheckResult {
  std::string name;
  std::vector<std::string> inputs;
  /// Per input: max over checked elements of |analytic - numeric| / max(|a|, |n|, 1e-8).
  std::vector<double> max_rel_error;
  std::vector<Index> checked;

  double worst() const;
  bool passed(double threshold) const { return worst() < threshold; }
};

/// Builds a scalar loss from the tape variables bound to the inputs.
using LossBuilder = std::function<Var(Tape<double>&, std::span<const Var>)>;

struct GradCheckOptions {
  double eps = 1e-5;
  /// Elements checked per input; 0 checks every element.
  Index samples_per_input = 0;
  std::uint64_t seed = 0;
};

/// Compares reverse-mode gradients of build(inputs) against central finite
/// differences for every (or a sampled subset of) input element.
GradCheckResult grad_check(std::string name, std::vector<Tensor<double>> inputs, std::vector<std::string> input_names,
                           const LossBuilder& build, const GradCheckOptions& options = {});

/// Relative error as used by the checker.
double relative_error(double analytic, double numeric);

/// Runs the elementary-operation suite: conv3d, strided conv, maxpool,
/// avgpool, batchnorm (train), relu, sigmoid, concat and the sigmoid + BCE
/// composite. Inputs avoid kinks and ties by at least 10 * eps.
std::vector<GradCheckResult> run_operation_gradchecks(std::uint64_t seed = 1, double eps = 1e-5);

}  // namespace s4nd
