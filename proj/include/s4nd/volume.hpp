#pragma once

#include <array>
#include <string>
#include <vector>

#include "s4nd/tensor.hpp"

namespace s4nd {

/// (x, y, z) triple; x is the width axis, z the slice axis.
struct Vec3 {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;

  friend bool operator==(const Vec3&, const Vec3&) = default;
};

enum class ElementType { met_short, met_float };

/// Geometry of a scan. Voxel (x, y, z) sits at world position
/// origin + spacing * (x, y, z).
struct VolumeMeta {
  std::array<Index, 3> dims{1, 1, 1};
  Vec3 spacing{1.0, 1.0, 1.0};
  Vec3 origin{0.0, 0.0, 0.0};
  ElementType element_type = ElementType::met_short;

  void validate() const;
  Vec3 world_to_voxel(const Vec3& world) const;
  Vec3 voxel_to_world(const Vec3& voxel) const;
  /// Volume tensor shape (1, 1, z, y, x).
  Shape tensor_shape() const { return {1, 1, dims[2], dims[1], dims[0]}; }
};

/// One nodule in world millimetres, as listed in annotation CSV files.
struct Annotation {
  std::string scan_id;
  Vec3 center;
  double diameter_mm = 0.0;
};

/// One nodule in continuous voxel coordinates of a particular volume or chunk.
struct VoxelAnnotation {
  std::string scan_id;
  Vec3 voxel;
  double diameter_mm = 0.0;

  /// Index of the voxel whose centre is nearest.
  std::array<Index, 3> nearest_voxel() const;
  bool inside(const std::array<Index, 3>& dims) const;
};

std::vector<VoxelAnnotation> to_voxel(const std::vector<Annotation>& annotations, const VolumeMeta& meta);
std::vector<Annotation> to_world(const std::vector<VoxelAnnotation>& annotations, const VolumeMeta& meta);

}  // namespace s4nd
