#include "s4nd/architecture.hpp"

#include <cmath>
#include <random>

#include "s4nd/rng.hpp"

namespace s4nd {

namespace {

template <typename T>
ConvLayer<T> make_conv(const std::string& name, Index cin, Index cout, Extent3 kernel, Extent3 stride,
                       std::mt19937_64& rng) {
  ConvLayer<T> c;
  c.params.in_channels = cin;
  c.params.out_channels = cout;
  c.params.kernel = kernel;
  c.params.stride = stride;
  c.params.padding = {kernel.d / 2, kernel.h / 2, kernel.w / 2};
  Tensor<T> w(c.params.weight_shape());
  // Fan-in scaled uniform (He) initialisation for ReLU stacks.
  const double bound = std::sqrt(6.0 / static_cast<double>(cin * c.params.taps()));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (Index i = 0; i < w.size(); ++i) w[i] = static_cast<T>(dist(rng));
  c.weight = Parameter<T>(name + ".weight", std::move(w));
  c.bias = Parameter<T>(name + ".bias", Tensor<T>(Shape{cout}));
  return c;
}

template <typename T>
BatchNormLayer<T> make_bn(const std::string& name, Index channels, const NetworkConfig& cfg) {
  BatchNormLayer<T> bn;
  bn.name = name;
  bn.gamma = Parameter<T>(name + ".gamma", Tensor<T>(Shape{channels}, T(1)));
  bn.beta = Parameter<T>(name + ".beta", Tensor<T>(Shape{channels}, T(0)));
  bn.state = BatchNormState<T>(channels);
  bn.state.momentum = static_cast<T>(cfg.bn_momentum);
  bn.state.epsilon = static_cast<T>(cfg.bn_epsilon);
  return bn;
}

template <typename T>
ConvBnRelu<T> make_unit(const std::string& name, Index cin, Index cout, Extent3 kernel, Extent3 stride,
                        const NetworkConfig& cfg, std::mt19937_64& rng) {
  return {make_conv<T>(name + ".conv", cin, cout, kernel, stride, rng), make_bn<T>(name + ".bn", cout, cfg)};
}

template <typename T>
DownsampleLayer<T> make_downsample(const std::string& name, Index channels, const NetworkConfig& cfg,
                                   std::mt19937_64& rng) {
  DownsampleLayer<T> d;
  d.mode = cfg.downsample_mode;
  d.pool = PoolParams{cfg.downsample_stride, cfg.downsample_stride};
  if (d.mode == DownsampleMode::stride2conv) {
    d.conv = make_conv<T>(name + ".conv", channels, channels, {3, 3, 3}, cfg.downsample_stride, rng);
  }
  return d;
}

// Untaped building blocks.

template <typename T>
Tensor<T> run_conv(const ConvLayer<T>& c, const Tensor<T>& x, ConvAlgorithm algo) {
  return conv3d(x, c.weight.value, c.bias.value, c.params, algo);
}

template <typename T>
Tensor<T> run_unit(ConvBnRelu<T>& u, const Tensor<T>& x, NormMode mode, ConvAlgorithm algo) {
  Tensor<T> y = run_conv(u.conv, x, algo);
  y = batchnorm(y, u.bn.gamma.value, u.bn.beta.value, u.bn.state, mode);
  return relu(y);
}

template <typename T>
Tensor<T> run_downsample(const DownsampleLayer<T>& d, const Tensor<T>& x, ConvAlgorithm algo) {
  switch (d.mode) {
    case DownsampleMode::maxpool: return maxpool3d(x, d.pool).output;
    case DownsampleMode::avgpool: return avgpool3d(x, d.pool);
    case DownsampleMode::stride2conv: return run_conv(*d.conv, x, algo);
  }
  return x;
}

template <typename T>
Tensor<T> run_block(DenseBlock<T>& block, const Tensor<T>& x0, NormMode mode, ConvAlgorithm algo,
                    std::vector<Tensor<T>>* layer_inputs) {
  Tensor<T> cat = x0;
  for (auto& layer : block.layers) {
    if (layer_inputs) layer_inputs->push_back(cat);
    Tensor<T> y = run_unit(layer, cat, mode, algo);
    cat = concat_channels<T>({&cat, &y});
  }
  return cat;
}

// Taped building blocks.

template <typename T>
Var tape_conv(Tape<T>& t, ConvLayer<T>& c, Var x, ConvAlgorithm algo) {
  return ag::conv3d(t, x, t.parameter(c.weight), t.parameter(c.bias), c.params, algo);
}

template <typename T>
Var tape_unit(Tape<T>& t, ConvBnRelu<T>& u, Var x, NormMode mode, ConvAlgorithm algo) {
  Var y = tape_conv(t, u.conv, x, algo);
  y = ag::batchnorm(t, y, t.parameter(u.bn.gamma), t.parameter(u.bn.beta), u.bn.state, mode);
  return ag::relu(t, y);
}

template <typename T>
Var tape_downsample(Tape<T>& t, DownsampleLayer<T>& d, Var x, ConvAlgorithm algo) {
  switch (d.mode) {
    case DownsampleMode::maxpool: return ag::maxpool3d(t, x, d.pool);
    case DownsampleMode::avgpool: return ag::avgpool3d(t, x, d.pool);
    case DownsampleMode::stride2conv: return tape_conv(t, *d.conv, x, algo);
  }
  return x;
}

}  // namespace

template <std::floating_point T>
Network<T>::Network(NetworkConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  std::mt19937_64 rng(derive_seed(seed, "init"));
  const NetworkConfig& c = config_;

  stem_ = make_unit<T>("stem", 1, c.stem_channels, {3, 3, 3}, c.stem_stride, c, rng);
  for (Index s = 0; s < c.stem_downsample; ++s) {
    stem_downsamples_.push_back(make_downsample<T>("stem_downsample" + std::to_string(s + 1), c.stem_channels, c, rng));
  }
  for (Index b = 0; b < c.blocks(); ++b) {
    DenseBlock<T> block;
    block.spec = c.block_spec(b);
    const std::string prefix = "block" + std::to_string(b + 1);
    for (Index k = 1; k <= block.spec.conv_layers(); ++k) {
      block.layers.push_back(make_unit<T>(prefix + ".layer" + std::to_string(k), block.spec.layer_input_channels(k),
                                          block.spec.growth_rate, c.dense_kernel, {1, 1, 1}, c, rng));
    }
    const Index out_channels = block.spec.output_channels();
    blocks_.push_back(std::move(block));
    if (b + 1 < c.blocks()) {
      const Index tchannels = c.transition_factor * c.growth_rates[static_cast<std::size_t>(b)];
      transitions_.push_back(make_unit<T>("transition" + std::to_string(b + 1), out_channels, tchannels, {1, 1, 1},
                                          {1, 1, 1}, c, rng));
      downsamples_.push_back(make_downsample<T>("downsample" + std::to_string(b + 1), tchannels, c, rng));
    }
  }
  head_ = make_conv<T>("head.conv", blocks_.back().spec.output_channels(), 1, {1, 1, 1}, {1, 1, 1}, rng);
  head_.bias.value.fill(static_cast<T>(c.head_bias));
}

template <std::floating_point T>
void Network<T>::check_input(const Tensor<T>& input) const {
  require_rank5(input, "network input");
  if (input.channels() != 1) throw DimensionError("network input must have one channel");
  const auto& s = config_.input_shape;
  if (input.width() != s[0] || input.height() != s[1] || input.depth() != s[2]) {
    throw DimensionError("network input spatial shape (x,y,z) = (" + std::to_string(input.width()) + "," +
                         std::to_string(input.height()) + "," + std::to_string(input.depth()) +
                         ") does not match configured input_shape (" + std::to_string(s[0]) + "," +
                         std::to_string(s[1]) + "," + std::to_string(s[2]) + ")");
  }
}

template <std::floating_point T>
Var Network<T>::forward(Tape<T>& tape, Var input, NormMode mode) {
  check_input(tape.value(input));
  const ConvAlgorithm algo = config_.conv_algorithm;
  Var x = tape_unit(tape, stem_, input, mode, algo);
  for (auto& d : stem_downsamples_) x = tape_downsample(tape, d, x, algo);
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    std::vector<Var> features{x};
    for (auto& layer : blocks_[b].layers) {
      Var in = features.size() == 1 ? features.front() : ag::concat_channels(tape, std::span<const Var>(features));
      features.push_back(tape_unit(tape, layer, in, mode, algo));
    }
    x = features.size() == 1 ? features.front() : ag::concat_channels(tape, std::span<const Var>(features));
    if (b < transitions_.size()) {
      x = tape_unit(tape, transitions_[b], x, mode, algo);
      x = tape_downsample(tape, downsamples_[b], x, algo);
    }
  }
  return ag::sigmoid(tape, tape_conv(tape, head_, x, algo));
}

template <std::floating_point T>
Tensor<T> Network<T>::infer(const Tensor<T>& input, NormMode mode) {
  check_input(input);
  const ConvAlgorithm algo = config_.conv_algorithm;
  Tensor<T> x = run_unit(stem_, input, mode, algo);
  for (auto& d : stem_downsamples_) x = run_downsample(d, x, algo);
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    x = run_block<T>(blocks_[b], x, mode, algo, nullptr);
    if (b < transitions_.size()) {
      x = run_unit(transitions_[b], x, mode, algo);
      x = run_downsample(downsamples_[b], x, algo);
    }
  }
  return sigmoid(run_conv(head_, x, algo));
}

template <std::floating_point T>
Tensor<T> Network<T>::probe_block(Index b, const Tensor<T>& x0, std::vector<Tensor<T>>* layer_inputs) {
  return run_block(blocks_.at(static_cast<std::size_t>(b)), x0, NormMode::infer, config_.conv_algorithm, layer_inputs);
}

template <std::floating_point T>
std::vector<Parameter<T>*> Network<T>::parameters() {
  std::vector<Parameter<T>*> out;
  auto conv = [&](ConvLayer<T>& c) {
    out.push_back(&c.weight);
    out.push_back(&c.bias);
  };
  auto unit = [&](ConvBnRelu<T>& u) {
    conv(u.conv);
    out.push_back(&u.bn.gamma);
    out.push_back(&u.bn.beta);
  };
  unit(stem_);
  for (auto& d : stem_downsamples_)
    if (d.conv) conv(*d.conv);
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    for (auto& l : blocks_[b].layers) unit(l);
    if (b < transitions_.size()) {
      unit(transitions_[b]);
      if (downsamples_[b].conv) conv(*downsamples_[b].conv);
    }
  }
  conv(head_);
  return out;
}

template <std::floating_point T>
std::vector<BatchNormLayer<T>*> Network<T>::norms() {
  std::vector<BatchNormLayer<T>*> out{&stem_.bn};
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    for (auto& l : blocks_[b].layers) out.push_back(&l.bn);
    if (b < transitions_.size()) out.push_back(&transitions_[b].bn);
  }
  return out;
}

template <std::floating_point T>
Index Network<T>::count_parameters() {
  Index n = 0;
  for (auto* p : parameters()) n += p->size();
  return n;
}

template <std::floating_point T>
Index Network<T>::conv_layer_count() const {
  Index n = 2;  // stem and head
  for (const auto& d : stem_downsamples_) n += d.conv ? 1 : 0;
  for (const auto& b : blocks_) n += static_cast<Index>(b.layers.size());
  n += static_cast<Index>(transitions_.size());
  for (const auto& d : downsamples_) n += d.conv ? 1 : 0;
  return n;
}

template <std::floating_point T>
Index Network<T>::pooling_layer_count() const {
  Index n = 0;
  for (const auto& d : stem_downsamples_) n += d.conv ? 0 : 1;
  for (const auto& d : downsamples_) n += d.conv ? 0 : 1;
  return n;
}

template <std::floating_point T>
std::vector<CheckpointRecord> Network<T>::state_records() {
  std::vector<CheckpointRecord> out;
  for (auto* p : parameters()) out.push_back({p->name, p->value.template cast<double>()});
  for (auto* bn : norms()) {
    const Index c = static_cast<Index>(bn->state.running_mean.size());
    out.push_back({bn->name + ".running_mean",
                   Tensor<double>(Shape{c}, std::vector<double>(bn->state.running_mean.begin(), bn->state.running_mean.end()))});
    out.push_back({bn->name + ".running_var",
                   Tensor<double>(Shape{c}, std::vector<double>(bn->state.running_var.begin(), bn->state.running_var.end()))});
  }
  return out;
}

template <std::floating_point T>
void Network<T>::load_state_records(std::span<const CheckpointRecord> records) {
  auto fetch = [&](const std::string& name, const Shape& shape) -> const Tensor<double>& {
    const CheckpointRecord* r = find_record(records, name);
    if (!r) throw ConfigError("checkpoint is incompatible with the configured network: missing record " + name);
    if (r->value.shape() != shape) {
      throw ConfigError("checkpoint is incompatible with the configured network: record " + name + " has shape " +
                        shape_string(r->value.shape()) + ", network expects " + shape_string(shape));
    }
    return r->value;
  };
  for (auto* p : parameters()) p->value = fetch(p->name, p->value.shape()).template cast<T>();
  for (auto* bn : norms()) {
    const Shape s{static_cast<Index>(bn->state.running_mean.size())};
    const auto& m = fetch(bn->name + ".running_mean", s);
    const auto& v = fetch(bn->name + ".running_var", s);
    for (Index i = 0; i < s[0]; ++i) {
      bn->state.running_mean[static_cast<std::size_t>(i)] = static_cast<T>(m[i]);
      bn->state.running_var[static_cast<std::size_t>(i)] = static_cast<T>(v[i]);
    }
  }
}

template class Network<float>;
template class Network<double>;

}  // namespace s4nd
