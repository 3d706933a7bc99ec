#include "s4nd/data_io.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <memory>
#include <random>
#include <sstream>

#include "s4nd/csv.hpp"
#include "s4nd/error.hpp"
#include "s4nd/rng.hpp"

namespace fs = std::filesystem;

namespace s4nd {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

template <typename V>
std::vector<V> parse_values(const std::string& key, const std::string& text, std::size_t count) {
  std::istringstream is(text);
  std::vector<V> out;
  V v{};
  while (is >> v) out.push_back(v);
  if (!is.eof() || out.size() != count) {
    throw ParseError(key + ": expected " + std::to_string(count) + " numeric values, got '" + text + "'");
  }
  return out;
}

template <typename T>
T byteswap_value(T v) {
  unsigned char b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  std::reverse(b, b + sizeof(T));
  std::memcpy(&v, b, sizeof(T));
  return v;
}

template <typename T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::little) return v;
  return byteswap_value(v);
}

bool truthy(const std::string& v) { return v == "True" || v == "true" || v == "1"; }

void write_text(std::ofstream& out, const fs::path& path) {
  if (!out.flush()) throw FormatError("write failed for " + path.string());
}

fs::path with_suffix(const fs::path& p, const char* suffix) {
  fs::path q = p;
  q += suffix;
  return q;
}

}  // namespace

// ---- MetaImage ----------------------------------------------------------

MetaImage read_metaimage(const fs::path& header) {
  std::ifstream in(header);
  if (!in) throw ParseError("cannot open MetaImage header " + header.string());
  std::map<std::string, std::string> keys;
  std::string line;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError(header.string() + ": malformed header line '" + trim(line) + "'");
    keys[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  auto require = [&](std::initializer_list<const char*> names) -> std::string {
    for (const char* n : names)
      if (auto it = keys.find(n); it != keys.end()) return it->second;
    throw ParseError(header.string() + ": missing key " + *names.begin());
  };

  const std::string object_type = require({"ObjectType"});
  if (object_type != "Image") throw ParseError(header.string() + ": ObjectType must be Image, got " + object_type);
  if (require({"NDims"}) != "3") throw ParseError(header.string() + ": NDims must be 3");
  if (auto it = keys.find("CompressedData"); it != keys.end() && truthy(it->second)) {
    throw ParseError(header.string() + ": CompressedData is not supported");
  }
  for (const char* k : {"BinaryDataByteOrderMSB", "ElementByteOrderMSB"}) {
    if (auto it = keys.find(k); it != keys.end() && truthy(it->second)) {
      throw ParseError(header.string() + ": big-endian payloads (" + std::string(k) + ") are not supported");
    }
  }

  MetaImage img;
  const auto dims = parse_values<Index>("DimSize", require({"DimSize"}), 3);
  const auto spacing = parse_values<double>("ElementSpacing", require({"ElementSpacing", "ElementSize"}), 3);
  const auto origin = parse_values<double>("Offset", require({"Offset", "Origin", "Position"}), 3);
  img.meta.dims = {dims[0], dims[1], dims[2]};
  img.meta.spacing = {spacing[0], spacing[1], spacing[2]};
  img.meta.origin = {origin[0], origin[1], origin[2]};
  try {
    img.meta.validate();
  } catch (const ConfigError& e) {
    throw ParseError(header.string() + ": " + e.what());
  }

  const std::string type = require({"ElementType"});
  std::size_t bytes = 0;
  if (type == "MET_SHORT") {
    img.meta.element_type = ElementType::met_short;
    bytes = 2;
  } else if (type == "MET_FLOAT") {
    img.meta.element_type = ElementType::met_float;
    bytes = 4;
  } else {
    throw ParseError(header.string() + ": unsupported ElementType " + type + " (expected MET_SHORT or MET_FLOAT)");
  }

  const std::string data_file = require({"ElementDataFile"});
  if (data_file == "LOCAL" || data_file == "LIST") {
    throw ParseError(header.string() + ": ElementDataFile " + data_file + " is not supported");
  }
  const fs::path raw = header.parent_path() / data_file;
  std::ifstream rin(raw, std::ios::binary);
  if (!rin) throw ParseError(header.string() + ": ElementDataFile " + raw.string() + " does not exist");
  const Index count = dims[0] * dims[1] * dims[2];
  const auto expected = static_cast<std::uintmax_t>(count) * bytes;
  const auto actual = fs::file_size(raw);
  if (actual != expected) {
    throw ParseError(header.string() + ": ElementDataFile " + raw.string() + " holds " + std::to_string(actual) +
                     " bytes but DimSize x ElementType requires " + std::to_string(expected));
  }
  std::vector<char> buf(static_cast<std::size_t>(expected));
  rin.read(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!rin) throw ParseError(header.string() + ": short read from " + raw.string());

  img.volume = Tensor<double>(img.meta.tensor_shape());
  auto out = img.volume.data();
  for (Index i = 0; i < count; ++i) {
    const char* p = buf.data() + static_cast<std::size_t>(i) * bytes;
    if (bytes == 2) {
      std::int16_t v;
      std::memcpy(&v, p, 2);
      out[static_cast<std::size_t>(i)] = to_little(v);
    } else {
      float v;
      std::memcpy(&v, p, 4);
      out[static_cast<std::size_t>(i)] = to_little(v);
    }
  }
  return img;
}

void write_metaimage(const fs::path& header, const Tensor<double>& volume, const VolumeMeta& meta) {
  meta.validate();
  if (volume.shape() != meta.tensor_shape()) {
    throw DimensionError("volume shape " + shape_string(volume.shape()) + " does not match header dims " +
                         shape_string(meta.tensor_shape()));
  }
  const bool is_short = meta.element_type == ElementType::met_short;
  fs::path raw = header;
  raw.replace_extension(".raw");

  std::vector<char> buf(static_cast<std::size_t>(volume.size()) * (is_short ? 2 : 4));
  for (Index i = 0; i < volume.size(); ++i) {
    char* p = buf.data() + static_cast<std::size_t>(i) * (is_short ? 2 : 4);
    if (is_short) {
      const double r = std::clamp(std::nearbyint(volume[i]), -32768.0, 32767.0);
      const auto v = to_little(static_cast<std::int16_t>(r));
      std::memcpy(p, &v, 2);
    } else {
      const auto v = to_little(static_cast<float>(volume[i]));
      std::memcpy(p, &v, 4);
    }
  }
  {
    std::ofstream out(with_suffix(raw, ".partial"), std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + raw.string());
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    write_text(out, raw);
  }
  fs::rename(with_suffix(raw, ".partial"), raw);

  std::ostringstream h;
  h << std::setprecision(17);
  h << "ObjectType = Image\nNDims = 3\nBinaryData = True\nBinaryDataByteOrderMSB = False\nCompressedData = False\n"
    << "TransformMatrix = 1 0 0 0 1 0 0 0 1\n"
    << "Offset = " << meta.origin.x << ' ' << meta.origin.y << ' ' << meta.origin.z << '\n'
    << "CenterOfRotation = 0 0 0\nAnatomicalOrientation = RAI\n"
    << "ElementSpacing = " << meta.spacing.x << ' ' << meta.spacing.y << ' ' << meta.spacing.z << '\n'
    << "DimSize = " << meta.dims[0] << ' ' << meta.dims[1] << ' ' << meta.dims[2] << '\n'
    << "ElementType = " << (is_short ? "MET_SHORT" : "MET_FLOAT") << '\n'
    << "ElementDataFile = " << raw.filename().string() << '\n';
  write_file_atomic(header, h.str());
}

// ---- Intensity and geometry --------------------------------------------

Tensor<double> normalize_hu(const Tensor<double>& volume, double lo, double hi) {
  if (!(lo < hi)) throw ConfigError("normalize_hu: window minimum must be below its maximum");
  Tensor<double> out(volume.shape());
  const double range = hi - lo;
  for (Index i = 0; i < volume.size(); ++i) out[i] = (std::clamp(volume[i], lo, hi) - lo) / range;
  return out;
}

MetaImage crop_or_pad_inplane(const Tensor<double>& volume, const VolumeMeta& meta, Index width, Index height,
                              double fill) {
  require_rank5(volume, "crop_or_pad_inplane");
  if (width < 1 || height < 1) throw ConfigError("crop_or_pad_inplane: target extents must be >= 1");
  const Index w = volume.width(), h = volume.height(), d = volume.depth();
  const Index ox = (w - width) / 2, oy = (h - height) / 2;
  MetaImage out;
  out.meta = meta;
  out.meta.dims = {width, height, d};
  out.meta.origin.x = meta.origin.x + static_cast<double>(ox) * meta.spacing.x;
  out.meta.origin.y = meta.origin.y + static_cast<double>(oy) * meta.spacing.y;
  out.volume = Tensor<double>(out.meta.tensor_shape(), fill);
  for (Index z = 0; z < d; ++z)
    for (Index y = 0; y < height; ++y) {
      const Index sy = y + oy;
      if (sy < 0 || sy >= h) continue;
      for (Index x = 0; x < width; ++x) {
        const Index sx = x + ox;
        if (sx < 0 || sx >= w) continue;
        out.volume.at(0, 0, z, y, x) = volume.at(0, 0, z, sy, sx);
      }
    }
  return out;
}

std::vector<Index> chunk_offsets(Index slices, Index depth, Index stride) {
  if (slices < 1 || depth < 1 || stride < 1) throw ConfigError("tile_z: slices, depth and stride must be >= 1");
  if (stride > depth) throw ConfigError("tile_z: stride must not exceed the chunk depth");
  std::vector<Index> out;
  for (Index z = 0; z < slices; z += stride) out.push_back(z);
  return out;
}

std::vector<Chunk> tile_z(const Tensor<double>& volume, const std::vector<VoxelAnnotation>& annotations, Index depth,
                          Index stride) {
  require_rank5(volume, "tile_z");
  if (volume.batch() != 1 || volume.channels() != 1) throw DimensionError("tile_z expects a (1, 1, z, y, x) volume");
  const Index d = volume.depth(), plane = volume.height() * volume.width();
  std::vector<Chunk> out;
  for (Index z0 : chunk_offsets(d, depth, stride)) {
    Chunk c;
    c.z_offset = z0;
    c.volume = Tensor<double>({1, 1, depth, volume.height(), volume.width()});
    const Index copy = std::min(depth, d - z0);
    std::copy_n(volume.data().begin() + z0 * plane, copy * plane, c.volume.data().begin());
    for (const auto& a : annotations) {
      const Index vz = a.nearest_voxel()[2];
      if (vz < z0 || vz >= z0 + copy) continue;
      VoxelAnnotation local = a;
      local.voxel.z -= static_cast<double>(z0);
      c.annotations.push_back(local);
    }
    out.push_back(std::move(c));
  }
  return out;
}

Tensor<double> untile_z(const std::vector<Chunk>& chunks, Index slices) {
  if (chunks.empty()) throw ConfigError("untile_z: no chunks");
  const auto& first = chunks.front().volume;
  const Index plane = first.height() * first.width();
  Tensor<double> out({1, 1, slices, first.height(), first.width()});
  std::vector<bool> filled(static_cast<std::size_t>(slices), false);
  for (const auto& c : chunks) {
    for (Index z = 0; z < c.volume.depth(); ++z) {
      const Index g = c.z_offset + z;
      if (g >= slices || filled[static_cast<std::size_t>(g)]) continue;
      std::copy_n(c.volume.data().begin() + z * plane, plane, out.data().begin() + g * plane);
      filled[static_cast<std::size_t>(g)] = true;
    }
  }
  if (std::find(filled.begin(), filled.end(), false) != filled.end()) {
    throw ConfigError("untile_z: chunks do not cover every slice");
  }
  return out;
}

// ---- Phantoms -----------------------------------------------------------

void PhantomSpec::validate() const {
  VolumeMeta m;
  m.dims = dims;
  m.spacing = spacing;
  m.validate();
  auto range = [](const char* name, double lo, double hi) {
    if (!(lo <= hi)) throw ConfigError(std::string(name) + ": lower bound exceeds upper bound");
  };
  range("nodule_count", static_cast<double>(nodule_count[0]), static_cast<double>(nodule_count[1]));
  range("vessel_count", static_cast<double>(vessel_count[0]), static_cast<double>(vessel_count[1]));
  range("nodule_diameter_mm", nodule_diameter_mm[0], nodule_diameter_mm[1]);
  range("vessel_radius_mm", vessel_radius_mm[0], vessel_radius_mm[1]);
  range("background_hu", background_hu[0], background_hu[1]);
  range("parenchyma_hu", parenchyma_hu[0], parenchyma_hu[1]);
  range("nodule_hu", nodule_hu[0], nodule_hu[1]);
  range("vessel_hu", vessel_hu[0], vessel_hu[1]);
  if (nodule_count[0] < 0 || vessel_count[0] < 0) throw ConfigError("nodule and vessel counts must be >= 0");
  if (!(nodule_diameter_mm[0] > 0.0)) throw ConfigError("nodule_diameter_mm must be positive");
  if (!(vessel_radius_mm[0] > 0.0)) throw ConfigError("vessel_radius_mm must be positive");
  const double min_extent = std::min({static_cast<double>(dims[0]) * spacing.x, static_cast<double>(dims[1]) * spacing.y,
                                      static_cast<double>(dims[2]) * spacing.z});
  if (!(nodule_diameter_mm[1] < min_extent)) {
    std::ostringstream os;
    os << "nodule_diameter_mm upper bound " << nodule_diameter_mm[1] << " mm must be below the smallest volume extent "
       << min_extent << " mm";
    throw ConfigError(os.str());
  }
  if (!(noise_hu >= 0.0)) throw ConfigError("noise_hu must be >= 0");
  if (!(edge_mm > 0.0)) throw ConfigError("edge_mm must be positive");
}

PhantomSpec parse_phantom_spec(const std::string& text) {
  PhantomSpec s;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  auto pair_d = [](const std::string& k, const std::string& v) {
    const auto x = parse_values<double>(k, v, 2);
    return std::array<double, 2>{x[0], x[1]};
  };
  auto pair_i = [](const std::string& k, const std::string& v) {
    const auto x = parse_values<Index>(k, v, 2);
    return std::array<Index, 2>{x[0], x[1]};
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError("phantom spec line " + std::to_string(line_no) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    try {
      if (key == "dims") {
        const auto v = parse_values<Index>(key, value, 3);
        s.dims = {v[0], v[1], v[2]};
      } else if (key == "spacing") {
        const auto v = parse_values<double>(key, value, 3);
        s.spacing = {v[0], v[1], v[2]};
      } else if (key == "nodule_count") s.nodule_count = pair_i(key, value);
      else if (key == "nodule_diameter_mm") s.nodule_diameter_mm = pair_d(key, value);
      else if (key == "vessel_count") s.vessel_count = pair_i(key, value);
      else if (key == "vessel_radius_mm") s.vessel_radius_mm = pair_d(key, value);
      else if (key == "noise_hu") s.noise_hu = parse_values<double>(key, value, 1)[0];
      else if (key == "background_hu") s.background_hu = pair_d(key, value);
      else if (key == "parenchyma_hu") s.parenchyma_hu = pair_d(key, value);
      else if (key == "nodule_hu") s.nodule_hu = pair_d(key, value);
      else if (key == "vessel_hu") s.vessel_hu = pair_d(key, value);
      else if (key == "edge_mm") s.edge_mm = parse_values<double>(key, value, 1)[0];
      else if (key == "seed") s.seed = parse_values<std::uint64_t>(key, value, 1)[0];
      else throw ParseError("unknown key '" + key + "'");
    } catch (const ParseError& e) {
      throw ParseError("phantom spec line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return s;
}

PhantomSpec load_phantom_spec(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open phantom spec " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_phantom_spec(ss.str());
}

namespace {

struct Nodule {
  std::array<Index, 3> center;
  Vec3 radii;
  double diameter;
  double hu;
};

struct Vessel {
  Vec3 point;
  Vec3 direction;
  double radius;
  double hu;
};

double soft_inside(double signed_distance, double edge) { return 1.0 / (1.0 + std::exp(signed_distance / edge)); }

}  // namespace

Scan generate_phantom(const PhantomSpec& spec, const std::string& scan_id) {
  spec.validate();
  std::mt19937_64 rng(derive_seed(spec.seed, "phantom"));
  auto uniform = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  auto uniform_int = [&](Index lo, Index hi) { return std::uniform_int_distribution<Index>(lo, hi)(rng); };
  auto draw = [&](const std::array<double, 2>& r) { return r[0] == r[1] ? r[0] : uniform(r[0], r[1]); };

  const auto [W, H, D] = spec.dims;
  const Vec3 sp = spec.spacing;
  const Vec3 extent{static_cast<double>(W - 1) * sp.x, static_cast<double>(H - 1) * sp.y,
                    static_cast<double>(D - 1) * sp.z};
  const Vec3 lung_center{extent.x / 2, extent.y / 2, 0.0};
  const double lung_a = 0.48 * static_cast<double>(W) * sp.x, lung_b = 0.48 * static_cast<double>(H) * sp.y;
  auto in_lung = [&](double x, double y) {
    const double u = (x - lung_center.x) / lung_a, v = (y - lung_center.y) / lung_b;
    return u * u + v * v <= 1.0;
  };

  const double background = draw(spec.background_hu);
  const double parenchyma = draw(spec.parenchyma_hu);

  std::vector<Nodule> nodules;
  const Index count = uniform_int(spec.nodule_count[0], spec.nodule_count[1]);
  constexpr int kRetries = 500;
  for (Index n = 0; n < count; ++n) {
    const double u = uniform(0.0, 1.0);
    const double diameter = spec.nodule_diameter_mm[0] + (spec.nodule_diameter_mm[1] - spec.nodule_diameter_mm[0]) * u * u;
    const double r = diameter / 2;
    // Centre voxel range keeping one radius from each boundary.
    std::array<Index, 3> lo{}, hi{};
    const std::array<double, 3> spacing{sp.x, sp.y, sp.z};
    for (int a = 0; a < 3; ++a) {
      lo[a] = static_cast<Index>(std::ceil(r / spacing[a]));
      hi[a] = spec.dims[a] - 1 - lo[a];
      if (lo[a] > hi[a]) {
        throw GenerationError("nodule of diameter " + std::to_string(diameter) + " mm does not fit along axis " +
                              std::to_string(a));
      }
    }
    bool placed = false;
    for (int attempt = 0; attempt < kRetries && !placed; ++attempt) {
      const std::array<Index, 3> c{uniform_int(lo[0], hi[0]), uniform_int(lo[1], hi[1]), uniform_int(lo[2], hi[2])};
      const double cx = static_cast<double>(c[0]) * sp.x, cy = static_cast<double>(c[1]) * sp.y,
                   cz = static_cast<double>(c[2]) * sp.z;
      if (!in_lung(cx, cy)) continue;
      bool clear = true;
      for (const auto& o : nodules) {
        const double dx = cx - static_cast<double>(o.center[0]) * sp.x, dy = cy - static_cast<double>(o.center[1]) * sp.y,
                     dz = cz - static_cast<double>(o.center[2]) * sp.z;
        if (std::sqrt(dx * dx + dy * dy + dz * dz) < r + o.diameter / 2 + 4 * spec.edge_mm) clear = false;
      }
      if (!clear) continue;
      Nodule nd;
      nd.center = c;
      nd.diameter = diameter;
      nd.radii = {r * uniform(0.85, 1.15), r * uniform(0.85, 1.15), r * uniform(0.85, 1.15)};
      nd.hu = draw(spec.nodule_hu);
      nodules.push_back(nd);
      placed = true;
    }
    if (!placed) {
      throw GenerationError("could not place nodule " + std::to_string(n + 1) + " of " + std::to_string(count) +
                            " after " + std::to_string(kRetries) + " attempts");
    }
  }

  std::vector<Vessel> vessels;
  const Index vcount = uniform_int(spec.vessel_count[0], spec.vessel_count[1]);
  for (Index v = 0; v < vcount; ++v) {
    Vessel ve;
    ve.point = {uniform(0.0, extent.x), uniform(0.0, extent.y), uniform(0.0, extent.z)};
    const double theta = uniform(0.0, 2.0 * std::acos(-1.0));
    const double dz = uniform(-0.3, 0.3);
    const double planar = std::sqrt(1.0 - dz * dz);
    ve.direction = {planar * std::cos(theta), planar * std::sin(theta), dz};
    ve.radius = draw(spec.vessel_radius_mm);
    ve.hu = draw(spec.vessel_hu);
    vessels.push_back(ve);
  }

  Scan scan;
  scan.id = scan_id;
  scan.meta.dims = spec.dims;
  scan.meta.spacing = sp;
  scan.meta.origin = {-static_cast<double>(W) * sp.x / 2, -static_cast<double>(H) * sp.y / 2,
                      -static_cast<double>(D) * sp.z / 2};
  scan.meta.element_type = ElementType::met_short;
  scan.volume = Tensor<double>(scan.meta.tensor_shape());
  std::normal_distribution<double> noise(0.0, 1.0);
  for (Index z = 0; z < D; ++z)
    for (Index y = 0; y < H; ++y)
      for (Index x = 0; x < W; ++x) {
        const double px = static_cast<double>(x) * sp.x, py = static_cast<double>(y) * sp.y,
                     pz = static_cast<double>(z) * sp.z;
        double value = in_lung(px, py) ? parenchyma : background;
        for (const auto& ve : vessels) {
          const double rx = px - ve.point.x, ry = py - ve.point.y, rz = pz - ve.point.z;
          const double along = rx * ve.direction.x + ry * ve.direction.y + rz * ve.direction.z;
          const double ox = rx - along * ve.direction.x, oy = ry - along * ve.direction.y,
                       oz = rz - along * ve.direction.z;
          const double w = soft_inside(std::sqrt(ox * ox + oy * oy + oz * oz) - ve.radius, spec.edge_mm);
          value += w * (ve.hu - value);
        }
        for (const auto& nd : nodules) {
          const double ux = (px - static_cast<double>(nd.center[0]) * sp.x) / nd.radii.x;
          const double uy = (py - static_cast<double>(nd.center[1]) * sp.y) / nd.radii.y;
          const double uz = (pz - static_cast<double>(nd.center[2]) * sp.z) / nd.radii.z;
          const double mean_r = (nd.radii.x + nd.radii.y + nd.radii.z) / 3;
          const double w = soft_inside((std::sqrt(ux * ux + uy * uy + uz * uz) - 1.0) * mean_r, spec.edge_mm);
          value += w * (nd.hu - value);
        }
        scan.volume.at(0, 0, z, y, x) = value + spec.noise_hu * noise(rng);
      }

  for (const auto& nd : nodules) {
    const Vec3 voxel{static_cast<double>(nd.center[0]), static_cast<double>(nd.center[1]),
                     static_cast<double>(nd.center[2])};
    scan.annotations.push_back({scan_id, scan.meta.voxel_to_world(voxel), nd.diameter});
  }
  return scan;
}

void write_phantom_dataset(const PhantomSpec& spec, Index count, const fs::path& dir) {
  spec.validate();
  if (count < 0) throw ConfigError("phantom count must be >= 0");
  fs::create_directories(dir);
  std::vector<Annotation> all;
  for (Index i = 0; i < count; ++i) {
    std::ostringstream id;
    id << "phantom_" << std::setw(3) << std::setfill('0') << i;
    PhantomSpec s = spec;
    s.seed = derive_seed(spec.seed, "phantom-" + std::to_string(i));
    const Scan scan = generate_phantom(s, id.str());
    write_metaimage(dir / (id.str() + ".mhd"), scan.volume, scan.meta);
    all.insert(all.end(), scan.annotations.begin(), scan.annotations.end());
  }
  write_annotations_csv(dir / "annotations.csv", all);
}

// ---- Datasets -----------------------------------------------------------

std::vector<Annotation> read_annotations_csv(const fs::path& path) {
  std::vector<Annotation> out;
  read_csv(path, kAnnotationHeader, [&](const std::vector<std::string>& f, std::size_t line) {
    Annotation a;
    a.scan_id = f[0];
    if (a.scan_id.empty()) throw ParseError("line " + std::to_string(line) + ": empty seriesuid");
    a.center = {csv_double(f[1], line, "coordX"), csv_double(f[2], line, "coordY"), csv_double(f[3], line, "coordZ")};
    a.diameter_mm = csv_double(f[4], line, "diameter_mm");
    if (!(a.diameter_mm > 0.0)) throw ParseError("line " + std::to_string(line) + ": diameter_mm must be positive");
    out.push_back(a);
  });
  return out;
}

void write_annotations_csv(const fs::path& path, const std::vector<Annotation>& annotations) {
  std::ostringstream os;
  os << std::setprecision(17) << kAnnotationHeader << '\n';
  for (const auto& a : annotations) {
    os << a.scan_id << ',' << a.center.x << ',' << a.center.y << ',' << a.center.z << ',' << a.diameter_mm << '\n';
  }
  write_file_atomic(path, os.str());
}

std::vector<fs::path> list_scans(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw ParseError("data directory " + dir.string() + " does not exist");
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".mhd") out.push_back(e.path());
  std::sort(out.begin(), out.end());
  if (out.empty()) throw ParseError("data directory " + dir.string() + " contains no .mhd files");
  return out;
}

std::vector<Scan> load_dataset(const fs::path& dir) {
  const auto headers = list_scans(dir);
  std::map<std::string, std::vector<Annotation>> by_id;
  if (fs::exists(dir / "annotations.csv")) {
    for (auto& a : read_annotations_csv(dir / "annotations.csv")) by_id[a.scan_id].push_back(a);
  }
  std::vector<Scan> out;
  for (const auto& h : headers) {
    MetaImage img = read_metaimage(h);
    Scan s;
    s.id = h.stem().string();
    s.volume = std::move(img.volume);
    s.meta = img.meta;
    if (auto it = by_id.find(s.id); it != by_id.end()) s.annotations = it->second;
    out.push_back(std::move(s));
  }
  return out;
}

std::string dataset_fingerprint(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw ParseError("data directory " + dir.string() + " does not exist");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    const auto ext = e.path().extension();
    if (e.is_regular_file() && (ext == ".mhd" || ext == ".raw" || ext == ".csv")) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), &EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) throw FormatError("SHA-256 unavailable");
  std::vector<char> buf(1 << 16);
  for (const auto& f : files) {
    const std::string name = f.filename().string();
    EVP_DigestUpdate(ctx.get(), name.data(), name.size() + 1);
    std::ifstream in(f, std::ios::binary);
    while (in) {
      in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
      if (in.gcount() > 0) EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(in.gcount()));
    }
  }
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), digest, &len);
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return hex.str();
}

std::vector<std::vector<std::string>> kfold_split(const std::vector<std::string>& ids, Index k, std::uint64_t seed) {
  const auto n = static_cast<Index>(ids.size());
  if (k < 1 || k > n) {
    throw ConfigError("kfold_split: k = " + std::to_string(k) + " must be in [1, " + std::to_string(n) + "]");
  }
  std::vector<std::string> shuffled = ids;
  std::mt19937_64 rng(derive_seed(seed, "kfold"));
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  std::vector<std::vector<std::string>> folds(static_cast<std::size_t>(k));
  Index pos = 0;
  for (Index f = 0; f < k; ++f) {
    const Index size = n / k + (f < n % k ? 1 : 0);
    folds[static_cast<std::size_t>(f)].assign(shuffled.begin() + pos, shuffled.begin() + pos + size);
    pos += size;
  }
  return folds;
}

}  // namespace s4nd
