#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "s4nd/gradcheck.hpp"
#include "s4nd/pipeline.hpp"

namespace s4nd {

struct EpochMetrics {
  int epoch = 0;  // 1-based
  double loss = 0.0;
  /// Training-set CPM; empty on epochs without evaluation.
  std::optional<double> train_cpm;
  double lr = 0.0;
  Index iterations = 0;
  double seconds = 0.0;
};

struct TrainOptions {
  /// Checkpoints and manifest go here; empty writes nothing.
  std::filesystem::path out_dir;
  /// Resume from a checkpoint written by a previous run of the same config.
  std::filesystem::path resume_from;
  std::string dataset_fingerprint;
  std::string precision = "f64";
  int threads = 1;
  std::function<void(const EpochMetrics&)> on_epoch;
};

struct TrainResult {
  std::vector<EpochMetrics> epochs;
  /// Mini-batch loss of every optimizer step in order.
  std::vector<double> step_losses;
  double best_cpm = -1.0;
  int best_epoch = 0;
  Index iterations = 0;
  bool reached_target = false;
};

/// Mini-batch SGD over every z-chunk of `scans`: shift augmentation, forward
/// in training mode, weighted BCE, backward, momentum step. Deterministic in
/// config.train.seed; a non-finite loss raises NumericError after writing a
/// dump of the batch to out_dir.
template <std::floating_point T>
TrainResult train_network(Network<T>& network, const RunConfig& config, const std::vector<PreparedScan>& scans,
                          const TrainOptions& options = {});

/// Parameters, batch-norm statistics, momentum buffers and loop position.
template <std::floating_point T>
std::vector<CheckpointRecord> training_checkpoint(Network<T>& network, const SgdOptimizer<T>& optimizer, int epoch,
                                                  Index iterations, double best_cpm, int best_epoch);

/// Restores network weights from a checkpoint, after checking that it was
/// written for the same input and grid geometry.
template <std::floating_point T>
void load_network_checkpoint(Network<T>& network, const std::filesystem::path& path);

// ---- Ablation -------------------------------------------------------------

struct AblationRow {
  DownsampleMode mode = DownsampleMode::maxpool;
  std::uint64_t seed = 0;
  double sensitivity = 0.0;
  double cpm = 0.0;
  Index parameters = 0;
};

struct AblationResult {
  std::vector<AblationRow> rows;
  std::vector<std::string> train_ids;
  std::vector<std::string> test_ids;

  /// "mode,seed,sensitivity,cpm,parameters" rows, then one "mean" row per mode.
  std::string csv() const;
  double mean_cpm(DownsampleMode mode) const;
};

/// Trains maxpool, avgpool and stride-2-conv variants of the same config on
/// all scans but the first of k = min(5, n) folds and scores each on that fold.
template <std::floating_point T>
AblationResult run_ablation(const RunConfig& config, const std::vector<PreparedScan>& scans,
                            const std::function<void(const std::string&)>& log = {});

// ---- Gradient checks --------------------------------------------------------

/// Central-difference check of `samples` randomly drawn scalar parameters of
/// a network built from `config` on a random batch. Conv biases that feed a
/// batch norm are excluded: their gradient is identically zero.
GradCheckResult network_gradcheck(const NetworkConfig& config, std::uint64_t seed, Index samples = 20,
                                  double eps = 1e-5);

}  // namespace s4nd
