#pragma once

#include <string>
#include <vector>

#include "s4nd/architecture.hpp"
#include "s4nd/config.hpp"
#include "s4nd/data_io.hpp"
#include "s4nd/froc.hpp"

namespace s4nd {

/// A scan ready for the network: intensities normalised to [0, 1], in-plane
/// extent fitted to the configured input, annotations in voxel coordinates.
struct PreparedScan {
  std::string id;
  Tensor<double> volume;
  VolumeMeta meta;
  std::vector<VoxelAnnotation> annotations;
};

PreparedScan prepare_scan(const Scan& scan, const RunConfig& config);
std::vector<PreparedScan> prepare_scans(const std::vector<Scan>& scans, const RunConfig& config);

/// Checks that chunking agrees with the network: chunk depth equals the input
/// depth and the chunk stride is a whole number of grid cells.
void validate_run(const RunConfig& config);

/// Grid covering a whole scan of `slices` slices: the in-plane grid of the
/// network and as many z cells as needed to cover every slice.
GridGeometry scan_grid_geometry(Index slices, const NetworkConfig& network);

std::vector<GroundTruthNodule> scan_ground_truth(const PreparedScan& scan, const NetworkConfig& network);

/// One training chunk.
struct Sample {
  std::string scan_id;
  Index z_offset = 0;
  Tensor<double> volume;
  std::vector<VoxelAnnotation> annotations;
};

/// Every z-chunk of every scan.
std::vector<Sample> make_samples(const std::vector<PreparedScan>& scans, const RunConfig& config);

/// Probability grid of a whole scan: the network runs once per chunk and
/// overlapping chunk grids are merged by maximum.
template <std::floating_point T>
Tensor<double> predict_scan(Network<T>& network, const PreparedScan& scan, const RunConfig& config);

struct ScanPrediction {
  std::string scan_id;
  Tensor<double> grid;
};

struct Evaluation {
  FrocReport report;
  /// Fraction of nodules whose cell scores at least 0.5.
  double sensitivity = 0.0;
  std::vector<ScanPrediction> predictions;
};

/// Runs predict_scan over every scan and scores the candidates.
template <std::floating_point T>
Evaluation evaluate_network(Network<T>& network, const std::vector<PreparedScan>& scans, const RunConfig& config,
                            bool keep_predictions = false);

}  // namespace s4nd
