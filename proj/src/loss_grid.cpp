#include "s4nd/loss_grid.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

namespace s4nd {

GridGeometry GridGeometry::make(std::array<Index, 3> volume_dims, std::array<Index, 3> grid_dims) {
  GridGeometry g;
  g.volume = volume_dims;
  g.grid = grid_dims;
  static constexpr const char* axis[] = {"x", "y", "z"};
  for (int a = 0; a < 3; ++a) {
    if (grid_dims[a] < 1 || volume_dims[a] < 1) throw ConfigError("grid and volume extents must be >= 1");
    if (volume_dims[a] % grid_dims[a] != 0) {
      throw ConfigError(std::string("volume extent ") + std::to_string(volume_dims[a]) + " on axis " + axis[a] +
                        " is not a multiple of grid extent " + std::to_string(grid_dims[a]));
    }
    g.cell[a] = volume_dims[a] / grid_dims[a];
  }
  return g;
}

std::optional<std::array<Index, 3>> GridGeometry::cell_of(const VoxelAnnotation& a) const {
  if (!a.inside(volume)) return std::nullopt;
  const auto v = a.nearest_voxel();
  return std::array<Index, 3>{v[0] / cell[0], v[1] / cell[1], v[2] / cell[2]};
}

Index GridLabels::positives() const {
  Index n = 0;
  for (Index i = 0; i < grid.size(); ++i) n += grid[i] > 0.5 ? 1 : 0;
  return n;
}

GridLabels encode_labels(std::span<const VoxelAnnotation> annotations, const GridGeometry& geometry) {
  GridLabels labels{geometry, Tensor<double>(geometry.tensor_shape()), {}};
  for (const auto& a : annotations) {
    if (auto cell = geometry.cell_of(a)) {
      labels.grid[geometry.linear_cell(*cell)] = 1.0;
    } else {
      labels.skipped.push_back(a);
    }
  }
  return labels;
}

GridLabels encode_labels(const std::vector<Annotation>& annotations, const VolumeMeta& meta,
                         std::array<Index, 3> grid_dims) {
  const auto voxel = to_voxel(annotations, meta);
  return encode_labels(voxel, GridGeometry::make(meta.dims, grid_dims));
}

double auto_pos_weight(std::span<const double> labels, double max_weight) {
  double ones = 0.0;
  for (double y : labels) ones += y;
  const double zeros = static_cast<double>(labels.size()) - ones;
  if (ones <= 0.0) return 1.0;
  return std::clamp(zeros / ones, 1.0, max_weight);
}

template <std::floating_point T>
BceResult<T> weighted_bce(const Tensor<T>& pred, const Tensor<T>& labels, const BceOptions& options) {
  if (pred.shape() != labels.shape()) {
    throw DimensionError("weighted_bce prediction shape " + shape_string(pred.shape()) + " differs from labels " +
                         shape_string(labels.shape()));
  }
  BceResult<T> r;
  if (options.pos_weight > 0.0) {
    r.pos_weight = options.pos_weight;
  } else {
    std::vector<double> y(labels.data().begin(), labels.data().end());
    r.pos_weight = auto_pos_weight(y, options.max_auto_pos_weight);
  }
  const double wp = r.pos_weight;
  const double wn = options.one_sided ? 0.0 : options.neg_weight;
  const double lo = options.clamp, hi = 1.0 - options.clamp;
  const double scale = options.mean ? 1.0 / static_cast<double>(pred.size()) : 1.0;
  r.grad = Tensor<T>(pred.shape());
  double total = 0.0;
  for (Index i = 0; i < pred.size(); ++i) {
    const double f = std::clamp(static_cast<double>(pred[i]), lo, hi);
    const double y = static_cast<double>(labels[i]);
    double term = 0.0, g = 0.0;
    if (y != 0.0) {
      term += wp * y * -std::log(f);
      g += -wp * y / f;
    }
    if (y != 1.0 && wn != 0.0) {
      term += wn * (1.0 - y) * -std::log(1.0 - f);
      g += wn * (1.0 - y) / (1.0 - f);
    }
    total += term;
    r.grad[i] = static_cast<T>(scale * g);
  }
  r.loss = scale * total;
  return r;
}

template <std::floating_point T>
Var weighted_bce(Tape<T>& tape, Var pred, const Tensor<T>& labels, const BceOptions& options) {
  BceResult<T> r = weighted_bce(tape.value(pred), labels, options);
  const Tensor<T>& p = tape.value(pred);
  for (Index i = 0; i < p.size(); ++i) {
    const double v = static_cast<double>(p[i]);
    tape.note_branch(v < options.clamp ? 1 : v > 1.0 - options.clamp ? 2 : 3);
  }
  auto grad = std::make_shared<Tensor<T>>(std::move(r.grad));
  return tape.record(Tensor<T>::scalar(static_cast<T>(r.loss)), {pred}, [=](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T> d(grad->shape());
    for (Index i = 0; i < d.size(); ++i) d[i] = g[0] * (*grad)[i];
    t.accumulate(pred, d);
  });
}

ShiftedSample shift_augment(const Tensor<double>& volume, std::span<const VoxelAnnotation> annotations,
                            ShiftDirection direction, Index amount) {
  require_rank5(volume, "shift_augment volume");
  const Index D = volume.depth(), H = volume.height(), W = volume.width();
  Index dx = 0, dy = 0;
  switch (direction) {
    case ShiftDirection::pos_x: dx = amount; break;
    case ShiftDirection::neg_x: dx = -amount; break;
    case ShiftDirection::pos_y: dy = amount; break;
    case ShiftDirection::neg_y: dy = -amount; break;
  }
  const Index extent = (dx != 0) ? W : H;
  if (amount < 0 || amount >= extent) {
    throw ConfigError("shift amount " + std::to_string(amount) + " must be in [0, " + std::to_string(extent) + ")");
  }
  ShiftedSample out{Tensor<double>(volume.shape()), {}};
  for (Index n = 0; n < volume.batch(); ++n)
    for (Index c = 0; c < volume.channels(); ++c)
      for (Index z = 0; z < D; ++z)
        for (Index y = 0; y < H; ++y) {
          const Index sy = y - dy;
          if (sy < 0 || sy >= H) continue;
          for (Index x = 0; x < W; ++x) {
            const Index sx = x - dx;
            if (sx < 0 || sx >= W) continue;
            out.volume.at(n, c, z, y, x) = volume.at(n, c, z, sy, sx);
          }
        }
  const std::array<Index, 3> dims{W, H, D};
  for (const auto& a : annotations) {
    VoxelAnnotation moved = a;
    moved.voxel.x += static_cast<double>(dx);
    moved.voxel.y += static_cast<double>(dy);
    if (moved.inside(dims)) out.annotations.push_back(moved);
  }
  return out;
}

template BceResult<float> weighted_bce(const Tensor<float>&, const Tensor<float>&, const BceOptions&);
template BceResult<double> weighted_bce(const Tensor<double>&, const Tensor<double>&, const BceOptions&);
template Var weighted_bce(Tape<float>&, Var, const Tensor<float>&, const BceOptions&);
template Var weighted_bce(Tape<double>&, Var, const Tensor<double>&, const BceOptions&);

}  // namespace s4nd
