#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "s4nd/kernels.hpp"

namespace s4nd {

/// A named learnable tensor and its accumulated gradient.
template <std::floating_point T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

  void zero_grad() { grad.fill(T(0)); }
  Index size() const { return value.size(); }
};

/// Handle to a value recorded on a Tape.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

/// Records a forward computation so gradients can be pulled back through it.
/// Backward visits nodes in exact reverse of recording order and then clears
/// the tape; calling backward again before a new forward throws StateError.
template <std::floating_point T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor<T>& grad_output)>;

  Var constant(Tensor<T> value);
  Var parameter(Parameter<T>& param);
  Var record(Tensor<T> value, std::vector<Var> inputs, BackwardFn backward);

  const Tensor<T>& value(Var v) const;
  bool requires_grad(Var v) const;
  /// Adds g into the gradient slot of v; no-op for constants.
  void accumulate(Var v, const Tensor<T>& g);
  /// Gradient reached by v in the last backward; only kept for inspection
  /// when keep_gradients(true) was set.
  const Tensor<T>& gradient(Var v) const;

  /// Seeds d(loss)/d(loss) = 1 and propagates to every reachable Parameter.
  void backward(Var loss);

  /// Folds the discrete choices of a piecewise op (relu signs, pooling
  /// argmax, loss clamping) into branch_signature(). Two forward passes with
  /// equal signatures ran through the same smooth piece of the graph.
  void note_branch(std::uint64_t choice) { branches_ = (branches_ ^ choice) * 0x100000001b3ULL + 0x9e3779b97f4a7c15ULL; }
  std::uint64_t branch_signature() const { return branches_; }

  void keep_gradients(bool keep) { keep_ = keep; }
  std::size_t size() const { return nodes_.size(); }
  void clear();

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool needs_grad = false;
    Parameter<T>* param = nullptr;
    BackwardFn backward;
  };

  Node& node(Var v);
  const Node& node(Var v) const;

  std::deque<Node> nodes_;
  bool keep_ = false;
  bool consumed_ = false;
  std::uint64_t branches_ = 0;
};

// Differentiable operations recorded on a tape.
namespace ag {

template <std::floating_point T>
Var conv3d(Tape<T>& tape, Var input, Var weights, Var bias, const ConvParams& params,
           ConvAlgorithm algorithm = ConvAlgorithm::im2col);

template <std::floating_point T>
Var maxpool3d(Tape<T>& tape, Var input, const PoolParams& params);

template <std::floating_point T>
Var avgpool3d(Tape<T>& tape, Var input, const PoolParams& params);

/// In train mode the running statistics in state are updated as a side effect.
template <std::floating_point T>
Var batchnorm(Tape<T>& tape, Var input, Var gamma, Var beta, BatchNormState<T>& state, NormMode mode);

template <std::floating_point T>
Var relu(Tape<T>& tape, Var input);

template <std::floating_point T>
Var sigmoid(Tape<T>& tape, Var input);

template <std::floating_point T>
Var concat_channels(Tape<T>& tape, std::span<const Var> inputs);

/// Elementwise product of two equally shaped values.
template <std::floating_point T>
Var mul(Tape<T>& tape, Var a, Var b);

/// Sum of all elements, as a one-element tensor.
template <std::floating_point T>
Var sum(Tape<T>& tape, Var input);

/// sum(input * weights) for a fixed weight tensor.
template <std::floating_point T>
Var weighted_sum(Tape<T>& tape, Var input, const Tensor<T>& weights);

}  // namespace ag

/// SGD with momentum and L2 weight decay:
///   v <- momentum * v + g + weight_decay * w ;  w <- w - lr * v
/// Gradients are zeroed after the update.
template <std::floating_point T>
class SgdOptimizer {
 public:
  SgdOptimizer(double momentum = 0.9, double weight_decay = 1e-4);

  void step(std::span<Parameter<T>* const> params, double lr);

  double momentum() const { return momentum_; }
  double weight_decay() const { return weight_decay_; }

  /// Velocity buffer per parameter name, for checkpointing.
  std::vector<std::pair<std::string, Tensor<T>>> state() const;
  void load_state(const std::vector<std::pair<std::string, Tensor<T>>>& state);

 private:
  double momentum_;
  double weight_decay_;
  std::vector<std::pair<std::string, Tensor<T>>> velocity_;
};

/// One-shot update without persistent momentum buffers.
template <std::floating_point T>
void sgd_step(std::span<Parameter<T>* const> params, std::span<Tensor<T>> velocity, double lr, double momentum,
              double weight_decay);

/// Step-decay learning rate: base * factor^(number of milestones <= epoch).
double step_decay_lr(double base, double factor, std::span<const int> milestones, int epoch);

}  // namespace s4nd
