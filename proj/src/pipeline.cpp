#include "s4nd/pipeline.hpp"

#include <algorithm>

#include "s4nd/error.hpp"

namespace s4nd {

void validate_run(const RunConfig& config) {
  config.network.validate();
  config.train.validate();
  const auto& n = config.network;
  const Index cell_depth = n.input_shape[2] / n.grid_shape[2];
  if (config.train.chunk_depth != n.input_shape[2]) {
    throw ConfigError("chunk_depth " + std::to_string(config.train.chunk_depth) + " must equal the input depth " +
                      std::to_string(n.input_shape[2]));
  }
  if (config.train.chunk_stride % cell_depth != 0) {
    throw ConfigError("chunk_stride must be a multiple of the grid cell depth " + std::to_string(cell_depth));
  }
}

PreparedScan prepare_scan(const Scan& scan, const RunConfig& config) {
  const auto& n = config.network;
  const auto& t = config.train;
  PreparedScan p;
  p.id = scan.id;
  MetaImage fitted{scan.volume, scan.meta};
  if (scan.meta.dims[0] != n.input_shape[0] || scan.meta.dims[1] != n.input_shape[1]) {
    fitted = crop_or_pad_inplane(scan.volume, scan.meta, n.input_shape[0], n.input_shape[1], t.hu_min);
  }
  p.volume = normalize_hu(fitted.volume, t.hu_min, t.hu_max);
  p.meta = fitted.meta;
  p.annotations = to_voxel(scan.annotations, p.meta);
  return p;
}

std::vector<PreparedScan> prepare_scans(const std::vector<Scan>& scans, const RunConfig& config) {
  std::vector<PreparedScan> out;
  out.reserve(scans.size());
  for (const auto& s : scans) out.push_back(prepare_scan(s, config));
  return out;
}

GridGeometry scan_grid_geometry(Index slices, const NetworkConfig& network) {
  const Index cell_depth = network.input_shape[2] / network.grid_shape[2];
  const Index cells_z = (slices + cell_depth - 1) / cell_depth;
  return GridGeometry::make({network.input_shape[0], network.input_shape[1], cells_z * cell_depth},
                            {network.grid_shape[0], network.grid_shape[1], cells_z});
}

std::vector<GroundTruthNodule> scan_ground_truth(const PreparedScan& scan, const NetworkConfig& network) {
  const GridGeometry g = scan_grid_geometry(scan.volume.depth(), network);
  std::vector<GroundTruthNodule> out;
  const std::array<Index, 3> dims{scan.volume.width(), scan.volume.height(), scan.volume.depth()};
  for (const auto& a : scan.annotations) {
    if (!a.inside(dims)) continue;
    if (auto c = g.cell_of(a)) out.push_back({scan.id, *c});
  }
  return out;
}

std::vector<Sample> make_samples(const std::vector<PreparedScan>& scans, const RunConfig& config) {
  std::vector<Sample> out;
  for (const auto& s : scans) {
    for (auto& c : tile_z(s.volume, s.annotations, config.train.chunk_depth, config.train.chunk_stride)) {
      out.push_back({s.id, c.z_offset, std::move(c.volume), std::move(c.annotations)});
    }
  }
  return out;
}

template <std::floating_point T>
Tensor<double> predict_scan(Network<T>& network, const PreparedScan& scan, const RunConfig& config) {
  const auto& n = network.config();
  const GridGeometry g = scan_grid_geometry(scan.volume.depth(), n);
  const Index cell_depth = n.input_shape[2] / n.grid_shape[2];
  Tensor<double> merged(g.tensor_shape(), 0.0);
  for (const auto& chunk : tile_z(scan.volume, {}, config.train.chunk_depth, config.train.chunk_stride)) {
    const Tensor<T> out = network.infer(chunk.volume.cast<T>(), NormMode::infer);
    const Index z0 = chunk.z_offset / cell_depth;
    for (Index z = 0; z < out.depth() && z0 + z < g.grid[2]; ++z)
      for (Index y = 0; y < out.height(); ++y)
        for (Index x = 0; x < out.width(); ++x) {
          double& m = merged.at(0, 0, z0 + z, y, x);
          m = std::max(m, static_cast<double>(out.at(0, 0, z, y, x)));
        }
  }
  return merged;
}

template <std::floating_point T>
Evaluation evaluate_network(Network<T>& network, const std::vector<PreparedScan>& scans, const RunConfig& config,
                            bool keep_predictions) {
  Evaluation ev;
  std::vector<Candidate> candidates;
  std::vector<GroundTruthNodule> truth;
  Index hits_at_half = 0;
  for (const auto& s : scans) {
    Tensor<double> grid = predict_scan(network, s, config);
    const auto gt = scan_ground_truth(s, network.config());
    for (const auto& n : gt) hits_at_half += grid.at(0, 0, n.cell[2], n.cell[1], n.cell[0]) >= 0.5;
    truth.insert(truth.end(), gt.begin(), gt.end());
    auto c = extract_candidates(grid, s.id, config.train.candidate_floor);
    candidates.insert(candidates.end(), c.begin(), c.end());
    if (keep_predictions) ev.predictions.push_back({s.id, std::move(grid)});
  }
  ev.report = evaluate(std::move(candidates), truth, static_cast<Index>(scans.size()));
  ev.sensitivity = static_cast<double>(hits_at_half) / static_cast<double>(truth.size());
  return ev;
}

template Tensor<double> predict_scan(Network<float>&, const PreparedScan&, const RunConfig&);
template Tensor<double> predict_scan(Network<double>&, const PreparedScan&, const RunConfig&);
template Evaluation evaluate_network(Network<float>&, const std::vector<PreparedScan>&, const RunConfig&, bool);
template Evaluation evaluate_network(Network<double>&, const std::vector<PreparedScan>&, const RunConfig&, bool);

}  // namespace s4nd
