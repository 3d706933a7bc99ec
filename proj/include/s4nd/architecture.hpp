#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "s4nd/autograd.hpp"
#include "s4nd/checkpoint.hpp"
#include "s4nd/config.hpp"

namespace s4nd {

template <std::floating_point T>
struct ConvLayer {
  ConvParams params;
  Parameter<T> weight;
  Parameter<T> bias;
};

template <std::floating_point T>
struct BatchNormLayer {
  Parameter<T> gamma;
  Parameter<T> beta;
  BatchNormState<T> state;
  std::string name;
};

/// conv -> batch norm -> ReLU, the unit used everywhere except the head.
template <std::floating_point T>
struct ConvBnRelu {
  ConvLayer<T> conv;
  BatchNormLayer<T> bn;
};

template <std::floating_point T>
struct DenseBlock {
  DenseBlockSpec spec;
  std::vector<ConvBnRelu<T>> layers;
};

template <std::floating_point T>
struct DownsampleLayer {
  DownsampleMode mode = DownsampleMode::maxpool;
  PoolParams pool;
  std::optional<ConvLayer<T>> conv;
};

/// Single-scale grid detector:
///   stem -> [stem downsampling] -> (block -> transition -> downsample)* ->
///   block -> 1x1x1 conv (1 channel) -> sigmoid
template <std::floating_point T>
class Network {
 public:
  /// Validates the config and initialises parameters deterministically from seed.
  Network(NetworkConfig config, std::uint64_t seed);

  const NetworkConfig& config() const { return config_; }

  /// Taped forward; returns probabilities of shape (N, 1, sz, sy, sx).
  Var forward(Tape<T>& tape, Var input, NormMode mode);
  /// Untaped forward that keeps no intermediate activations.
  Tensor<T> infer(const Tensor<T>& input, NormMode mode = NormMode::infer);

  /// Runs block b on x0 without recording, reporting the input tensor seen by
  /// each of its layers.
  Tensor<T> probe_block(Index b, const Tensor<T>& x0, std::vector<Tensor<T>>* layer_inputs);

  std::vector<Parameter<T>*> parameters();
  /// Scalar learnables: conv weights and biases, batch-norm gamma and beta.
  Index count_parameters();
  Index conv_layer_count() const;
  Index pooling_layer_count() const;

  /// Parameters plus batch-norm running statistics, as checkpoint records.
  std::vector<CheckpointRecord> state_records();
  /// Restores every record produced by state_records; ConfigError on any
  /// missing or mismatched record.
  void load_state_records(std::span<const CheckpointRecord> records);

  std::vector<DenseBlock<T>>& blocks() { return blocks_; }
  ConvBnRelu<T>& stem() { return stem_; }
  std::vector<ConvBnRelu<T>>& transitions() { return transitions_; }

 private:
  void check_input(const Tensor<T>& input) const;
  std::vector<BatchNormLayer<T>*> norms();

  NetworkConfig config_;
  ConvBnRelu<T> stem_;
  std::vector<DownsampleLayer<T>> stem_downsamples_;
  std::vector<DenseBlock<T>> blocks_;
  std::vector<ConvBnRelu<T>> transitions_;
  std::vector<DownsampleLayer<T>> downsamples_;
  ConvLayer<T> head_;
};

extern template class Network<float>;
extern template class Network<double>;

/// Reference parameter count the default layout is compared against.
inline constexpr Index kReferenceParameterCount = 4'572'995;

}  // namespace s4nd
