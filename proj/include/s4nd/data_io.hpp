#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "s4nd/volume.hpp"

namespace s4nd {

/// A scan volume of shape (1, 1, z, y, x) and its geometry.
struct Scan {
  std::string id;
  Tensor<double> volume;
  VolumeMeta meta;
  std::vector<Annotation> annotations;
};

// ---- MetaImage ----------------------------------------------------------

struct MetaImage {
  Tensor<double> volume;
  VolumeMeta meta;
};

/// Reads a .mhd header and its little-endian raw payload. Values are returned
/// as stored (Hounsfield units for CT).
MetaImage read_metaimage(const std::filesystem::path& header);

/// Writes `<stem>.mhd` and `<stem>.raw` next to each other. MET_SHORT payloads
/// are rounded to the nearest integer and saturated to the int16 range.
void write_metaimage(const std::filesystem::path& header, const Tensor<double>& volume, const VolumeMeta& meta);

// ---- Intensity and geometry --------------------------------------------

/// Clips to [lo, hi] and maps affinely onto [0, 1].
Tensor<double> normalize_hu(const Tensor<double>& volume, double lo = -1000.0, double hi = 400.0);

/// Centre crop or pad in-plane to (width, height); padding uses `fill`. The
/// origin is moved so world coordinates of retained voxels are unchanged.
MetaImage crop_or_pad_inplane(const Tensor<double>& volume, const VolumeMeta& meta, Index width, Index height,
                              double fill);

struct Chunk {
  Tensor<double> volume;
  std::vector<VoxelAnnotation> annotations;
  Index z_offset = 0;
};

/// Chunks start at 0, stride, 2*stride, ... for every start inside the
/// volume; chunks reaching past the last slice are zero padded. Annotation z
/// is shifted by -z_offset and kept only in chunks that contain its voxel.
std::vector<Chunk> tile_z(const Tensor<double>& volume, const std::vector<VoxelAnnotation>& annotations,
                          Index depth = 8, Index stride = 8);
/// Start slices produced by tile_z for a volume with `slices` slices.
std::vector<Index> chunk_offsets(Index slices, Index depth, Index stride);
/// Reassembles `slices` slices; overlapping slices take the value from the
/// first chunk covering them.
Tensor<double> untile_z(const std::vector<Chunk>& chunks, Index slices);

// ---- Phantoms -----------------------------------------------------------

struct PhantomSpec {
  std::array<Index, 3> dims{64, 64, 8};
  Vec3 spacing{0.8, 0.8, 2.0};
  std::array<Index, 2> nodule_count{1, 3};
  /// Diameters are drawn as lo + (hi - lo) u^2, skewing towards small nodules.
  std::array<double, 2> nodule_diameter_mm{3.0, 32.0};
  std::array<Index, 2> vessel_count{2, 5};
  std::array<double, 2> vessel_radius_mm{0.5, 1.2};
  double noise_hu = 25.0;
  std::array<double, 2> background_hu{-1000.0, -1000.0};
  std::array<double, 2> parenchyma_hu{-900.0, -800.0};
  std::array<double, 2> nodule_hu{-100.0, 100.0};
  std::array<double, 2> vessel_hu{-150.0, 0.0};
  /// Soft edge width of nodules and vessels.
  double edge_mm = 0.4;
  std::uint64_t seed = 1;

  /// ConfigError naming the violated constraint.
  void validate() const;
};

/// "key = value" text with (x, y, z) triples and "lo hi" ranges; unknown keys
/// are ParseErrors.
PhantomSpec parse_phantom_spec(const std::string& text);
PhantomSpec load_phantom_spec(const std::filesystem::path& path);

/// Synthetic chest-like volume in pseudo-HU: an elliptical parenchyma region,
/// soft-edged ellipsoidal nodules at integer voxel centres, tube distractors
/// and Gaussian noise. Deterministic in spec.seed. Nodule centres keep at
/// least one radius from every boundary and never overlap each other.
Scan generate_phantom(const PhantomSpec& spec, const std::string& scan_id);

/// Writes `count` phantoms (`phantom_000.mhd`, ...) and `annotations.csv`;
/// phantom i uses a seed derived from spec.seed and i.
void write_phantom_dataset(const PhantomSpec& spec, Index count, const std::filesystem::path& dir);

// ---- Datasets -----------------------------------------------------------

inline constexpr const char* kAnnotationHeader = "seriesuid,coordX,coordY,coordZ,diameter_mm";

std::vector<Annotation> read_annotations_csv(const std::filesystem::path& path);
void write_annotations_csv(const std::filesystem::path& path, const std::vector<Annotation>& annotations);

/// Every .mhd under `dir` (sorted by name) with the rows of
/// `dir/annotations.csv` whose seriesuid equals the file stem.
std::vector<Scan> load_dataset(const std::filesystem::path& dir);
/// Headers only, sorted; ParseError when the directory has none.
std::vector<std::filesystem::path> list_scans(const std::filesystem::path& dir);

/// SHA-256 over the names and contents of every .mhd, .raw and .csv file in
/// `dir`, in name order; lowercase hex.
std::string dataset_fingerprint(const std::filesystem::path& dir);

/// Shuffles ids with `seed` and cuts them into k folds whose sizes differ by
/// at most one (the first n mod k folds get the extra id).
std::vector<std::vector<std::string>> kfold_split(const std::vector<std::string>& ids, Index k, std::uint64_t seed);

}  // namespace s4nd
