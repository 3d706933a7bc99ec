#include "s4nd/config.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>

namespace s4nd {

std::string to_string(DownsampleMode mode) {
  switch (mode) {
    case DownsampleMode::maxpool: return "maxpool";
    case DownsampleMode::avgpool: return "avgpool";
    case DownsampleMode::stride2conv: return "stride2conv";
  }
  return "?";
}

std::string to_string(OutputPolicy policy) {
  return policy == OutputPolicy::standard ? "standard" : "one_fewer";
}

DownsampleMode parse_downsample_mode(const std::string& text) {
  if (text == "maxpool") return DownsampleMode::maxpool;
  if (text == "avgpool") return DownsampleMode::avgpool;
  if (text == "stride2conv") return DownsampleMode::stride2conv;
  throw ConfigError("unknown downsample_mode '" + text + "' (expected maxpool, avgpool or stride2conv)");
}

OutputPolicy parse_output_policy(const std::string& text) {
  if (text == "standard") return OutputPolicy::standard;
  if (text == "one_fewer") return OutputPolicy::one_fewer;
  throw ConfigError("unknown output_policy '" + text + "' (expected standard or one_fewer)");
}

void DenseBlockSpec::validate() const {
  if (num_layers < 1) throw ConfigError("dense block needs at least one layer");
  if (growth_rate < 1) throw ConfigError("dense block growth rate must be >= 1");
  if (input_channels < 1) throw ConfigError("dense block input channels must be >= 1");
}

DenseBlockSpec NetworkConfig::block_spec(Index b) const {
  DenseBlockSpec s;
  s.num_layers = block_depths.at(static_cast<std::size_t>(b));
  s.growth_rate = growth_rates.at(static_cast<std::size_t>(b));
  s.input_channels = b == 0 ? stem_channels : transition_factor * growth_rates.at(static_cast<std::size_t>(b - 1));
  s.policy = output_policy;
  return s;
}

Extent3 NetworkConfig::output_extent() const {
  ConvParams stem;
  stem.kernel = {3, 3, 3};
  stem.padding = {1, 1, 1};
  stem.stride = stem_stride;
  Extent3 e = stem.output_extent({input_shape[2], input_shape[1], input_shape[0]});
  const PoolParams pool{downsample_stride, downsample_stride};
  for (Index s = 0; s < downsample_stages(); ++s) e = pool.output_extent(e);
  return e;
}

void NetworkConfig::validate() const {
  for (int a = 0; a < 3; ++a) {
    if (input_shape[a] < 1) throw ConfigError("input_shape extents must be >= 1");
    if (grid_shape[a] < 1) throw ConfigError("grid_shape extents must be >= 1");
  }
  if (growth_rates.empty()) throw ConfigError("at least one dense block is required");
  if (block_depths.size() != growth_rates.size()) {
    throw ConfigError("growth_rates has " + std::to_string(growth_rates.size()) + " entries but block_depths has " +
                      std::to_string(block_depths.size()));
  }
  if (stem_channels < 1 || transition_factor < 1) throw ConfigError("stem_channels and transition_factor must be >= 1");
  if (stem_downsample < 0) throw ConfigError("stem_downsample must be >= 0");
  if (!(bn_epsilon > 0.0)) throw ConfigError("bn_epsilon must be positive");
  if (!(bn_momentum >= 0.0 && bn_momentum < 1.0)) throw ConfigError("bn_momentum must be in [0, 1)");
  for (Index b = 0; b < blocks(); ++b) block_spec(b).validate();
  if (dense_kernel.d % 2 == 0 || dense_kernel.h % 2 == 0 || dense_kernel.w % 2 == 0) {
    throw ConfigError("dense_kernel extents must be odd so blocks preserve spatial shape");
  }

  // Reduction check: the stem stride times every downsampling stage must map
  // the input exactly onto the grid.
  const Index rx = stem_stride.w * static_cast<Index>(std::pow(downsample_stride.w, downsample_stages()));
  const Index ry = stem_stride.h * static_cast<Index>(std::pow(downsample_stride.h, downsample_stages()));
  const Index rz = stem_stride.d * static_cast<Index>(std::pow(downsample_stride.d, downsample_stages()));
  const Extent3 reached = output_extent();
  const bool exact = input_shape[0] % rx == 0 && input_shape[1] % ry == 0 && input_shape[2] % rz == 0;
  if (!exact || reached.w != grid_shape[0] || reached.h != grid_shape[1] || reached.d != grid_shape[2]) {
    std::ostringstream os;
    os << "downsampling schedule reaches grid (" << reached.w << "," << reached.h << "," << reached.d
       << ") with reduction (" << rx << "," << ry << "," << rz << ") but grid (" << grid_shape[0] << ","
       << grid_shape[1] << "," << grid_shape[2] << ") requires reduction (" << input_shape[0] / grid_shape[0] << ","
       << input_shape[1] / grid_shape[1] << "," << input_shape[2] / grid_shape[2] << ")";
    throw GeometryError(os.str());
  }
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(lr > 0.0)) throw ConfigError("lr must be positive");
  if (chunk_depth < 1 || chunk_stride < 1 || chunk_stride > chunk_depth) {
    throw ConfigError("chunk_stride must be in [1, chunk_depth]");
  }
  if (!(hu_min < hu_max)) throw ConfigError("hu window minimum must be below its maximum");
  if (augment_prob < 0.0 || augment_prob > 1.0) throw ConfigError("augment_prob must be in [0, 1]");
  if (ablate_seeds < 1) throw ConfigError("ablate_seeds must be >= 1");
  if (eval_every < 1) throw ConfigError("eval_every must be >= 1");
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename V>
std::vector<V> parse_list(const std::string& key, const std::string& value) {
  std::istringstream is(value);
  std::vector<V> out;
  std::string tok;
  while (is >> tok) {
    std::istringstream ts(tok);
    V v{};
    if (!(ts >> v) || !ts.eof()) throw ParseError("config key '" + key + "': cannot parse '" + tok + "'");
    out.push_back(v);
  }
  if (out.empty()) throw ParseError("config key '" + key + "' has no value");
  return out;
}

template <typename V>
V parse_one(const std::string& key, const std::string& value) {
  auto v = parse_list<V>(key, value);
  if (v.size() != 1) throw ParseError("config key '" + key + "' expects a single value");
  return v.front();
}

std::array<Index, 3> parse_triple(const std::string& key, const std::string& value) {
  auto v = parse_list<Index>(key, value);
  if (v.size() != 3) throw ParseError("config key '" + key + "' expects three values (x y z)");
  return {v[0], v[1], v[2]};
}

Extent3 xyz_to_extent(const std::array<Index, 3>& v) { return {v[2], v[1], v[0]}; }

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "yes") return true;
  if (value == "false" || value == "0" || value == "no") return false;
  throw ParseError("config key '" + key + "' expects true or false");
}

}  // namespace

RunConfig parse_config(const std::string& text) {
  RunConfig c;
  NetworkConfig& n = c.network;
  TrainConfig& t = c.train;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError("config line " + std::to_string(line_no) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));

    if (key == "input_shape") n.input_shape = parse_triple(key, value);
    else if (key == "grid_shape") n.grid_shape = parse_triple(key, value);
    else if (key == "blocks") {
      const auto b = parse_one<Index>(key, value);
      if (b < 1) throw ConfigError("blocks must be >= 1");
      n.growth_rates.resize(static_cast<std::size_t>(b), n.growth_rates.empty() ? 16 : n.growth_rates.back());
      n.block_depths.resize(static_cast<std::size_t>(b), n.block_depths.empty() ? 6 : n.block_depths.back());
    }
    else if (key == "growth_rates") n.growth_rates = parse_list<Index>(key, value);
    else if (key == "block_depths") n.block_depths = parse_list<Index>(key, value);
    else if (key == "downsample_mode") n.downsample_mode = parse_downsample_mode(value);
    else if (key == "output_policy") n.output_policy = parse_output_policy(value);
    else if (key == "dense_kernel") n.dense_kernel = xyz_to_extent(parse_triple(key, value));
    else if (key == "stem_channels") n.stem_channels = parse_one<Index>(key, value);
    else if (key == "stem_stride") n.stem_stride = xyz_to_extent(parse_triple(key, value));
    else if (key == "stem_downsample") n.stem_downsample = parse_one<Index>(key, value);
    else if (key == "downsample_stride") n.downsample_stride = xyz_to_extent(parse_triple(key, value));
    else if (key == "transition_factor") n.transition_factor = parse_one<Index>(key, value);
    else if (key == "head_bias") n.head_bias = parse_one<double>(key, value);
    else if (key == "bn_momentum") n.bn_momentum = parse_one<double>(key, value);
    else if (key == "bn_epsilon") n.bn_epsilon = parse_one<double>(key, value);
    else if (key == "conv_algorithm") {
      if (value == "im2col") n.conv_algorithm = ConvAlgorithm::im2col;
      else if (value == "direct") n.conv_algorithm = ConvAlgorithm::direct;
      else throw ConfigError("conv_algorithm must be im2col or direct");
    }
    else if (key == "epochs") t.epochs = parse_one<int>(key, value);
    else if (key == "batch_size") t.batch_size = parse_one<int>(key, value);
    else if (key == "lr") t.lr = parse_one<double>(key, value);
    else if (key == "momentum") t.momentum = parse_one<double>(key, value);
    else if (key == "weight_decay") t.weight_decay = parse_one<double>(key, value);
    else if (key == "lr_decay_epochs") t.lr_decay_epochs = value == "none" ? std::vector<int>{} : parse_list<int>(key, value);
    else if (key == "lr_decay_factor") t.lr_decay_factor = parse_one<double>(key, value);
    else if (key == "max_iterations") t.max_iterations = parse_one<int>(key, value);
    else if (key == "target_loss") t.target_loss = parse_one<double>(key, value);
    else if (key == "eval_every") t.eval_every = parse_one<int>(key, value);
    else if (key == "pos_weight") t.pos_weight = value == "auto" ? -1.0 : parse_one<double>(key, value);
    else if (key == "neg_weight") t.neg_weight = parse_one<double>(key, value);
    else if (key == "max_pos_weight") t.max_pos_weight = parse_one<double>(key, value);
    else if (key == "one_sided_loss") t.one_sided_loss = parse_bool(key, value);
    else if (key == "loss_reduction") {
      if (value == "mean") t.sum_loss = false;
      else if (value == "sum") t.sum_loss = true;
      else throw ConfigError("loss_reduction must be mean or sum");
    }
    else if (key == "augment_shift") t.augment_shift = parse_one<Index>(key, value);
    else if (key == "augment_prob") t.augment_prob = parse_one<double>(key, value);
    else if (key == "chunk_depth") t.chunk_depth = parse_one<Index>(key, value);
    else if (key == "chunk_stride") t.chunk_stride = parse_one<Index>(key, value);
    else if (key == "hu_window") {
      auto v = parse_list<double>(key, value);
      if (v.size() != 2) throw ParseError("hu_window expects two values");
      t.hu_min = v[0];
      t.hu_max = v[1];
    }
    else if (key == "candidate_floor") t.candidate_floor = parse_one<double>(key, value);
    else if (key == "seed") t.seed = parse_one<std::uint64_t>(key, value);
    else if (key == "ablate_seeds") t.ablate_seeds = parse_one<int>(key, value);
    else if (key == "ablate_epochs") t.ablate_epochs = parse_one<int>(key, value);
    else throw ParseError("config line " + std::to_string(line_no) + ": unknown key '" + key + "'");
  }
  n.validate();
  t.validate();
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ParseError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str());
}

std::string format_config(const RunConfig& c) {
  const NetworkConfig& n = c.network;
  const TrainConfig& t = c.train;
  std::ostringstream os;
  os << std::setprecision(std::numeric_limits<double>::max_digits10);
  auto list = [&](const auto& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? " " : "") + std::to_string(v[i]);
    return s;
  };
  auto xyz = [](Extent3 e) { return std::to_string(e.w) + " " + std::to_string(e.h) + " " + std::to_string(e.d); };
  os << "input_shape = " << n.input_shape[0] << ' ' << n.input_shape[1] << ' ' << n.input_shape[2] << '\n'
     << "grid_shape = " << n.grid_shape[0] << ' ' << n.grid_shape[1] << ' ' << n.grid_shape[2] << '\n'
     << "blocks = " << n.blocks() << '\n'
     << "growth_rates = " << list(n.growth_rates) << '\n'
     << "block_depths = " << list(n.block_depths) << '\n'
     << "downsample_mode = " << to_string(n.downsample_mode) << '\n'
     << "output_policy = " << to_string(n.output_policy) << '\n'
     << "dense_kernel = " << xyz(n.dense_kernel) << '\n'
     << "stem_channels = " << n.stem_channels << '\n'
     << "stem_stride = " << xyz(n.stem_stride) << '\n'
     << "stem_downsample = " << n.stem_downsample << '\n'
     << "downsample_stride = " << xyz(n.downsample_stride) << '\n'
     << "transition_factor = " << n.transition_factor << '\n'
     << "head_bias = " << n.head_bias << '\n'
     << "bn_momentum = " << n.bn_momentum << '\n'
     << "bn_epsilon = " << n.bn_epsilon << '\n'
     << "conv_algorithm = " << (n.conv_algorithm == ConvAlgorithm::im2col ? "im2col" : "direct") << '\n'
     << "epochs = " << t.epochs << '\n'
     << "batch_size = " << t.batch_size << '\n'
     << "lr = " << t.lr << '\n'
     << "momentum = " << t.momentum << '\n'
     << "weight_decay = " << t.weight_decay << '\n'
     << "lr_decay_epochs = " << (t.lr_decay_epochs.empty() ? std::string("none") : list(t.lr_decay_epochs)) << '\n'
     << "lr_decay_factor = " << t.lr_decay_factor << '\n'
     << "max_iterations = " << t.max_iterations << '\n'
     << "target_loss = " << t.target_loss << '\n'
     << "eval_every = " << t.eval_every << '\n'
     << "pos_weight = ";
  if (t.pos_weight > 0) os << t.pos_weight;
  else os << "auto";
  os << '\n'
     << "neg_weight = " << t.neg_weight << '\n'
     << "max_pos_weight = " << t.max_pos_weight << '\n'
     << "one_sided_loss = " << (t.one_sided_loss ? "true" : "false") << '\n'
     << "loss_reduction = " << (t.sum_loss ? "sum" : "mean") << '\n'
     << "augment_shift = " << t.augment_shift << '\n'
     << "augment_prob = " << t.augment_prob << '\n'
     << "chunk_depth = " << t.chunk_depth << '\n'
     << "chunk_stride = " << t.chunk_stride << '\n'
     << "hu_window = " << t.hu_min << ' ' << t.hu_max << '\n'
     << "candidate_floor = " << t.candidate_floor << '\n'
     << "seed = " << t.seed << '\n'
     << "ablate_seeds = " << t.ablate_seeds << '\n'
     << "ablate_epochs = " << t.ablate_epochs << '\n';
  return os.str();
}

}  // namespace s4nd
