#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "s4nd/kernels.hpp"

namespace s4nd {

enum class DownsampleMode { maxpool, avgpool, stride2conv };

/// standard: block output = c0 + i*g (input plus every layer).
/// one_fewer: block output = c0 + (i-1)*g, realised with i-1 growth layers.
enum class OutputPolicy { standard, one_fewer };

std::string to_string(DownsampleMode mode);
std::string to_string(OutputPolicy policy);
DownsampleMode parse_downsample_mode(const std::string& text);
OutputPolicy parse_output_policy(const std::string& text);

struct DenseBlockSpec {
  Index num_layers = 6;
  Index growth_rate = 16;
  Index input_channels = 16;
  OutputPolicy policy = OutputPolicy::standard;

  void validate() const;
  /// Convolution layers actually built.
  Index conv_layers() const { return policy == OutputPolicy::standard ? num_layers : num_layers - 1; }
  /// Input channels of layer k (1-based): c0 + (k - 1) g.
  Index layer_input_channels(Index k) const { return input_channels + (k - 1) * growth_rate; }
  Index output_channels() const { return input_channels + conv_layers() * growth_rate; }
};

/// Declarative description of the detector. Spatial triples read from config
/// files are in (x, y, z) order; internally they are stored as Extent3
/// (depth, height, width).
struct NetworkConfig {
  std::array<Index, 3> input_shape{512, 512, 8};
  std::array<Index, 3> grid_shape{16, 16, 8};
  std::vector<Index> growth_rates{16, 16, 16, 32, 64};
  std::vector<Index> block_depths{6, 6, 6, 6, 6};
  DownsampleMode downsample_mode = DownsampleMode::maxpool;
  OutputPolicy output_policy = OutputPolicy::standard;
  Extent3 dense_kernel{3, 3, 3};
  Index stem_channels = 16;
  Extent3 stem_stride{1, 2, 2};
  /// Downsampling stages applied directly after the stem, before block 1.
  Index stem_downsample = 0;
  Extent3 downsample_stride{1, 2, 2};
  Index transition_factor = 4;
  double head_bias = -4.0;
  double bn_momentum = 0.9;
  double bn_epsilon = 1e-5;
  ConvAlgorithm conv_algorithm = ConvAlgorithm::im2col;

  Index blocks() const { return static_cast<Index>(growth_rates.size()); }
  Index downsample_stages() const { return blocks() - 1 + stem_downsample; }
  DenseBlockSpec block_spec(Index b) const;
  /// Spatial extent (d, h, w) reached after the stem and all downsampling.
  Extent3 output_extent() const;
  /// Throws ConfigError/GeometryError describing the first violated invariant.
  void validate() const;
};

struct TrainConfig {
  int epochs = 200;
  int batch_size = 2;
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::vector<int> lr_decay_epochs{120, 170};
  double lr_decay_factor = 0.1;
  /// Stop after this many optimizer steps; 0 = no limit.
  int max_iterations = 0;
  /// Stop once the epoch-mean loss is below this and training CPM is 1; 0 = never.
  double target_loss = 0.0;
  int eval_every = 1;

  double pos_weight = -1.0;
  double neg_weight = 1.0;
  double max_pos_weight = 200.0;
  bool one_sided_loss = false;
  bool sum_loss = false;

  Index augment_shift = 32;
  double augment_prob = 0.0;
  Index chunk_depth = 8;
  Index chunk_stride = 8;
  double hu_min = -1000.0;
  double hu_max = 400.0;
  double candidate_floor = 1e-4;

  std::uint64_t seed = 1;
  int ablate_seeds = 3;
  /// Epoch budget per ablation arm; 0 uses `epochs`.
  int ablate_epochs = 0;

  void validate() const;
};

struct RunConfig {
  NetworkConfig network;
  TrainConfig train;
};

/// Parses "key = value" lines; '#' starts a comment. Unknown keys are errors.
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);
/// Canonical text form; parse_config(format_config(c)) reproduces c.
std::string format_config(const RunConfig& config);

}  // namespace s4nd
