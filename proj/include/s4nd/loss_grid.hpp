#pragma once

#include <optional>
#include <span>

#include "s4nd/autograd.hpp"
#include "s4nd/volume.hpp"

namespace s4nd {

/// Partition of a volume of dims (x, y, z) into grid (sx, sy, sz) cells of
/// cell (x, y, z) voxels each. Volume dims must be exact multiples of the grid.
struct GridGeometry {
  std::array<Index, 3> volume{512, 512, 8};
  std::array<Index, 3> grid{16, 16, 8};
  std::array<Index, 3> cell{32, 32, 1};

  static GridGeometry make(std::array<Index, 3> volume_dims, std::array<Index, 3> grid_dims);

  /// k_n: total number of cells.
  Index cell_count() const { return grid[0] * grid[1] * grid[2]; }
  /// Label/probability tensor shape (1, 1, sz, sy, sx).
  Shape tensor_shape() const { return {1, 1, grid[2], grid[1], grid[0]}; }
  /// Cell (x, y, z) holding the annotation's nearest voxel, if inside.
  std::optional<std::array<Index, 3>> cell_of(const VoxelAnnotation& a) const;
  Index linear_cell(const std::array<Index, 3>& c) const { return (c[2] * grid[1] + c[1]) * grid[0] + c[0]; }
};

/// Binary occupancy grid: 1 where a nodule centre falls in the cell.
struct GridLabels {
  GridGeometry geometry;
  Tensor<double> grid;
  /// Annotations outside the volume; skipped rather than rejected because
  /// z-tiling legitimately leaves nodules out of a chunk.
  std::vector<VoxelAnnotation> skipped;

  Index cell_count() const { return geometry.cell_count(); }
  Index positives() const;
};

GridLabels encode_labels(std::span<const VoxelAnnotation> annotations, const GridGeometry& geometry);
GridLabels encode_labels(const std::vector<Annotation>& annotations, const VolumeMeta& meta,
                         std::array<Index, 3> grid_dims);

struct BceOptions {
  /// Weight of the positive term; <= 0 selects the automatic per-batch
  /// weight (#negatives / #positives clipped to [1, max_auto_pos_weight]).
  double pos_weight = -1.0;
  double neg_weight = 1.0;
  double max_auto_pos_weight = 200.0;
  /// Keep only the -y log f term.
  bool one_sided = false;
  /// Divide by the number of cells (true) or return the plain sum.
  bool mean = true;
  double clamp = 1e-7;
};

template <std::floating_point T>
struct BceResult {
  double loss = 0.0;
  Tensor<T> grad;
  double pos_weight = 1.0;
};

double auto_pos_weight(std::span<const double> labels, double max_weight = 200.0);

/// loss = (1/k) sum_i [ wp y_i (-log f_i) + wn (1 - y_i) (-log(1 - f_i)) ],
/// f clamped to [clamp, 1 - clamp]; the gradient is taken at the clamped value.
template <std::floating_point T>
BceResult<T> weighted_bce(const Tensor<T>& pred, const Tensor<T>& labels, const BceOptions& options = {});

template <std::floating_point T>
Var weighted_bce(Tape<T>& tape, Var pred, const Tensor<T>& labels, const BceOptions& options = {});

enum class ShiftDirection { pos_x, neg_x, pos_y, neg_y };

struct ShiftedSample {
  Tensor<double> volume;
  std::vector<VoxelAnnotation> annotations;
};

/// Translates a (1, 1, z, y, x) volume in-plane with zero fill; annotations
/// move identically and are dropped once they leave the volume.
ShiftedSample shift_augment(const Tensor<double>& volume, std::span<const VoxelAnnotation> annotations,
                            ShiftDirection direction, Index amount);

}  // namespace s4nd
