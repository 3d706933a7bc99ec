#include "s4nd/volume.hpp"

#include <cmath>

namespace s4nd {

void VolumeMeta::validate() const {
  for (Index d : dims)
    if (d < 1) throw ConfigError("volume dimensions must be >= 1");
  if (!(spacing.x > 0 && spacing.y > 0 && spacing.z > 0)) throw ConfigError("volume spacing must be positive");
}

Vec3 VolumeMeta::world_to_voxel(const Vec3& w) const {
  return {(w.x - origin.x) / spacing.x, (w.y - origin.y) / spacing.y, (w.z - origin.z) / spacing.z};
}

Vec3 VolumeMeta::voxel_to_world(const Vec3& v) const {
  return {origin.x + spacing.x * v.x, origin.y + spacing.y * v.y, origin.z + spacing.z * v.z};
}

std::array<Index, 3> VoxelAnnotation::nearest_voxel() const {
  return {static_cast<Index>(std::floor(voxel.x + 0.5)), static_cast<Index>(std::floor(voxel.y + 0.5)),
          static_cast<Index>(std::floor(voxel.z + 0.5))};
}

bool VoxelAnnotation::inside(const std::array<Index, 3>& dims) const {
  const auto v = nearest_voxel();
  for (int a = 0; a < 3; ++a)
    if (v[a] < 0 || v[a] >= dims[a]) return false;
  return true;
}

std::vector<VoxelAnnotation> to_voxel(const std::vector<Annotation>& annotations, const VolumeMeta& meta) {
  std::vector<VoxelAnnotation> out;
  out.reserve(annotations.size());
  for (const auto& a : annotations) out.push_back({a.scan_id, meta.world_to_voxel(a.center), a.diameter_mm});
  return out;
}

std::vector<Annotation> to_world(const std::vector<VoxelAnnotation>& annotations, const VolumeMeta& meta) {
  std::vector<Annotation> out;
  out.reserve(annotations.size());
  for (const auto& a : annotations) out.push_back({a.scan_id, meta.voxel_to_world(a.voxel), a.diameter_mm});
  return out;
}

}  // namespace s4nd
