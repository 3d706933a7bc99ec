#include "s4nd/autograd.hpp"

#include <memory>

namespace s4nd {

namespace {

template <typename T>
void add_into(Tensor<T>& dst, const Tensor<T>& src) {
  if (dst.shape() != src.shape()) {
    throw DimensionError("gradient shape " + shape_string(src.shape()) + " does not match " + shape_string(dst.shape()));
  }
  T* d = dst.data().data();
  const T* s = src.data().data();
  for (Index i = 0; i < dst.size(); ++i) d[i] += s[i];
}

}  // namespace

template <std::floating_point T>
typename Tape<T>::Node& Tape<T>::node(Var v) {
  if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) {
    throw StateError("variable " + std::to_string(v.id) + " is not recorded on this tape");
  }
  return nodes_[static_cast<std::size_t>(v.id)];
}

template <std::floating_point T>
const typename Tape<T>::Node& Tape<T>::node(Var v) const {
  return const_cast<Tape*>(this)->node(v);
}

template <std::floating_point T>
Var Tape<T>::constant(Tensor<T> value) {
  nodes_.push_back(Node{std::move(value), {}, false, nullptr, {}});
  return Var{static_cast<int>(nodes_.size() - 1)};
}

template <std::floating_point T>
Var Tape<T>::parameter(Parameter<T>& param) {
  nodes_.push_back(Node{param.value, {}, true, &param, {}});
  return Var{static_cast<int>(nodes_.size() - 1)};
}

template <std::floating_point T>
Var Tape<T>::record(Tensor<T> value, std::vector<Var> inputs, BackwardFn backward) {
  bool needs = false;
  for (Var in : inputs) needs = needs || node(in).needs_grad;
  nodes_.push_back(Node{std::move(value), {}, needs, nullptr, needs ? std::move(backward) : BackwardFn{}});
  return Var{static_cast<int>(nodes_.size() - 1)};
}

template <std::floating_point T>
const Tensor<T>& Tape<T>::value(Var v) const {
  return node(v).value;
}

template <std::floating_point T>
bool Tape<T>::requires_grad(Var v) const {
  return node(v).needs_grad;
}

template <std::floating_point T>
void Tape<T>::accumulate(Var v, const Tensor<T>& g) {
  Node& n = node(v);
  if (!n.needs_grad) return;
  if (n.grad.empty()) {
    if (g.shape() != n.value.shape()) {
      throw DimensionError("gradient shape " + shape_string(g.shape()) + " does not match value shape " +
                           shape_string(n.value.shape()));
    }
    n.grad = g;
  } else {
    add_into(n.grad, g);
  }
}

template <std::floating_point T>
const Tensor<T>& Tape<T>::gradient(Var v) const {
  return node(v).grad;
}

template <std::floating_point T>
void Tape<T>::backward(Var loss) {
  if (nodes_.empty() || consumed_) throw StateError("backward called without a recorded forward pass");
  Node& root = node(loss);
  if (root.value.size() != 1) {
    throw DimensionError("backward needs a scalar loss, got shape " + shape_string(root.value.shape()));
  }
  root.grad = Tensor<T>(root.value.shape(), T(1));
  for (std::size_t i = static_cast<std::size_t>(loss.id) + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.grad.empty()) continue;
    if (n.param) {
      add_into(n.param->grad, n.grad);
    } else if (n.backward) {
      n.backward(*this, n.grad);
    }
    if (!keep_) n.grad = Tensor<T>();
  }
  if (keep_) {
    consumed_ = true;
  } else {
    clear();
  }
}

template <std::floating_point T>
void Tape<T>::clear() {
  nodes_.clear();
  consumed_ = false;
  branches_ = 0;
}

namespace ag {

template <std::floating_point T>
Var conv3d(Tape<T>& tape, Var input, Var weights, Var bias, const ConvParams& params, ConvAlgorithm algorithm) {
  Tensor<T> out = s4nd::conv3d(tape.value(input), tape.value(weights), tape.value(bias), params, algorithm);
  return tape.record(std::move(out), {input, weights, bias}, [=](Tape<T>& t, const Tensor<T>& g) {
    ConvGradients<T> grads = conv3d_backward(t.value(input), t.value(weights), g, params);
    t.accumulate(input, grads.input);
    t.accumulate(weights, grads.weights);
    t.accumulate(bias, grads.bias);
  });
}

template <std::floating_point T>
Var maxpool3d(Tape<T>& tape, Var input, const PoolParams& params) {
  MaxPoolResult<T> r = s4nd::maxpool3d(tape.value(input), params);
  for (Index a : r.argmax) tape.note_branch(static_cast<std::uint64_t>(a));
  auto argmax = std::make_shared<std::vector<Index>>(std::move(r.argmax));
  return tape.record(std::move(r.output), {input}, [=](Tape<T>& t, const Tensor<T>& g) {
    t.accumulate(input, maxpool3d_backward(g, std::span<const Index>(*argmax), t.value(input).shape()));
  });
}

template <std::floating_point T>
Var avgpool3d(Tape<T>& tape, Var input, const PoolParams& params) {
  Tensor<T> out = s4nd::avgpool3d(tape.value(input), params);
  return tape.record(std::move(out), {input}, [=](Tape<T>& t, const Tensor<T>& g) {
    t.accumulate(input, avgpool3d_backward(g, t.value(input).shape(), params));
  });
}

template <std::floating_point T>
Var batchnorm(Tape<T>& tape, Var input, Var gamma, Var beta, BatchNormState<T>& state, NormMode mode) {
  auto cache = std::make_shared<BatchNormCache<T>>();
  Tensor<T> out = s4nd::batchnorm(tape.value(input), tape.value(gamma), tape.value(beta), state, mode, cache.get());
  return tape.record(std::move(out), {input, gamma, beta}, [=](Tape<T>& t, const Tensor<T>& g) {
    BatchNormGradients<T> grads = batchnorm_backward(g, t.value(gamma), *cache);
    t.accumulate(input, grads.input);
    t.accumulate(gamma, grads.gamma);
    t.accumulate(beta, grads.beta);
  });
}

template <std::floating_point T>
Var relu(Tape<T>& tape, Var input) {
  const Tensor<T>& x = tape.value(input);
  for (Index i = 0; i < x.size(); ++i) tape.note_branch(x[i] > T(0) ? 1 : 2);
  return tape.record(s4nd::relu(tape.value(input)), {input}, [=](Tape<T>& t, const Tensor<T>& g) {
    t.accumulate(input, relu_backward(g, t.value(input)));
  });
}

template <std::floating_point T>
Var sigmoid(Tape<T>& tape, Var input) {
  Tensor<T> out = s4nd::sigmoid(tape.value(input));
  auto saved = std::make_shared<Tensor<T>>(out);
  return tape.record(std::move(out), {input}, [=](Tape<T>& t, const Tensor<T>& g) {
    t.accumulate(input, sigmoid_backward(g, *saved));
  });
}

template <std::floating_point T>
Var concat_channels(Tape<T>& tape, std::span<const Var> inputs) {
  std::vector<const Tensor<T>*> values;
  std::vector<Index> channels;
  for (Var v : inputs) {
    values.push_back(&tape.value(v));
    channels.push_back(values.back()->channels());
  }
  Tensor<T> out = s4nd::concat_channels<T>(std::span<const Tensor<T>* const>(values));
  std::vector<Var> ins(inputs.begin(), inputs.end());
  return tape.record(std::move(out), ins, [ins, channels](Tape<T>& t, const Tensor<T>& g) {
    Index begin = 0;
    for (std::size_t i = 0; i < ins.size(); ++i) {
      if (t.requires_grad(ins[i])) t.accumulate(ins[i], slice_channels(g, begin, channels[i]));
      begin += channels[i];
    }
  });
}

template <std::floating_point T>
Var mul(Tape<T>& tape, Var a, Var b) {
  const Tensor<T>& x = tape.value(a);
  const Tensor<T>& y = tape.value(b);
  if (x.shape() != y.shape()) throw DimensionError("mul operands differ in shape");
  Tensor<T> out(x.shape());
  for (Index i = 0; i < x.size(); ++i) out[i] = x[i] * y[i];
  return tape.record(std::move(out), {a, b}, [=](Tape<T>& t, const Tensor<T>& g) {
    const Tensor<T>& xv = t.value(a);
    const Tensor<T>& yv = t.value(b);
    Tensor<T> ga(xv.shape()), gb(yv.shape());
    for (Index i = 0; i < xv.size(); ++i) {
      ga[i] = g[i] * yv[i];
      gb[i] = g[i] * xv[i];
    }
    t.accumulate(a, ga);
    t.accumulate(b, gb);
  });
}

template <std::floating_point T>
Var sum(Tape<T>& tape, Var input) {
  const Tensor<T>& x = tape.value(input);
  T s = T(0);
  for (Index i = 0; i < x.size(); ++i) s += x[i];
  return tape.record(Tensor<T>::scalar(s), {input}, [=](Tape<T>& t, const Tensor<T>& g) {
    t.accumulate(input, Tensor<T>(t.value(input).shape(), g[0]));
  });
}

template <std::floating_point T>
Var weighted_sum(Tape<T>& tape, Var input, const Tensor<T>& weights) {
  const Tensor<T>& x = tape.value(input);
  if (x.size() != weights.size()) throw DimensionError("weighted_sum weights differ in size from input");
  T s = T(0);
  for (Index i = 0; i < x.size(); ++i) s += x[i] * weights[i];
  auto w = std::make_shared<Tensor<T>>(weights.reshaped(x.shape()));
  return tape.record(Tensor<T>::scalar(s), {input}, [=](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T> gx(w->shape());
    for (Index i = 0; i < gx.size(); ++i) gx[i] = g[0] * (*w)[i];
    t.accumulate(input, gx);
  });
}

}  // namespace ag

template <std::floating_point T>
void sgd_step(std::span<Parameter<T>* const> params, std::span<Tensor<T>> velocity, double lr, double momentum,
              double weight_decay) {
  if (!(lr > 0.0)) throw ConfigError("learning rate must be positive, got " + std::to_string(lr));
  if (velocity.size() != params.size()) throw DimensionError("one velocity buffer per parameter is required");
  const T mu = static_cast<T>(momentum), wd = static_cast<T>(weight_decay), rate = static_cast<T>(lr);
  for (std::size_t p = 0; p < params.size(); ++p) {
    Parameter<T>& param = *params[p];
    Tensor<T>& v = velocity[p];
    if (v.shape() != param.value.shape()) v = Tensor<T>(param.value.shape());
    T* w = param.value.data().data();
    T* g = param.grad.data().data();
    T* vel = v.data().data();
    for (Index i = 0; i < param.value.size(); ++i) {
      vel[i] = mu * vel[i] + g[i] + wd * w[i];
      w[i] = w[i] - rate * vel[i];
      g[i] = T(0);
    }
  }
}

template <std::floating_point T>
SgdOptimizer<T>::SgdOptimizer(double momentum, double weight_decay) : momentum_(momentum), weight_decay_(weight_decay) {}

template <std::floating_point T>
void SgdOptimizer<T>::step(std::span<Parameter<T>* const> params, double lr) {
  if (velocity_.size() != params.size()) {
    std::vector<std::pair<std::string, Tensor<T>>> fresh;
    for (Parameter<T>* p : params) {
      Tensor<T> v(p->value.shape());
      for (auto& [name, old] : velocity_)
        if (name == p->name && old.shape() == v.shape()) v = old;
      fresh.emplace_back(p->name, std::move(v));
    }
    velocity_ = std::move(fresh);
  }
  std::vector<Tensor<T>> buffers;
  buffers.reserve(velocity_.size());
  for (auto& entry : velocity_) buffers.push_back(std::move(entry.second));
  try {
    sgd_step<T>(params, buffers, lr, momentum_, weight_decay_);
  } catch (...) {
    for (std::size_t i = 0; i < buffers.size(); ++i) velocity_[i].second = std::move(buffers[i]);
    throw;
  }
  for (std::size_t i = 0; i < buffers.size(); ++i) velocity_[i].second = std::move(buffers[i]);
}

template <std::floating_point T>
std::vector<std::pair<std::string, Tensor<T>>> SgdOptimizer<T>::state() const {
  return velocity_;
}

template <std::floating_point T>
void SgdOptimizer<T>::load_state(const std::vector<std::pair<std::string, Tensor<T>>>& state) {
  velocity_ = state;
}

double step_decay_lr(double base, double factor, std::span<const int> milestones, int epoch) {
  double lr = base;
  for (int m : milestones)
    if (epoch >= m) lr *= factor;
  return lr;
}

template class Tape<float>;
template class Tape<double>;
template class SgdOptimizer<float>;
template class SgdOptimizer<double>;

#define S4ND_INSTANTIATE(T)                                                                                  \
  template Var ag::conv3d(Tape<T>&, Var, Var, Var, const ConvParams&, ConvAlgorithm);                        \
  template Var ag::maxpool3d(Tape<T>&, Var, const PoolParams&);                                              \
  template Var ag::avgpool3d(Tape<T>&, Var, const PoolParams&);                                              \
  template Var ag::batchnorm(Tape<T>&, Var, Var, Var, BatchNormState<T>&, NormMode);                         \
  template Var ag::relu(Tape<T>&, Var);                                                                      \
  template Var ag::sigmoid(Tape<T>&, Var);                                                                   \
  template Var ag::concat_channels(Tape<T>&, std::span<const Var>);                                          \
  template Var ag::mul(Tape<T>&, Var, Var);                                                                  \
  template Var ag::sum(Tape<T>&, Var);                                                                       \
  template Var ag::weighted_sum(Tape<T>&, Var, const Tensor<T>&);                                            \
  template void sgd_step(std::span<Parameter<T>* const>, std::span<Tensor<T>>, double, double, double);

S4ND_INSTANTIATE(float)
S4ND_INSTANTIATE(double)

#undef S4ND_INSTANTIATE

}  // namespace s4nd
