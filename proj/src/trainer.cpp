#include "s4nd/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <json.hpp>
#include <numeric>
#include <random>
#include <sstream>

#include "s4nd/csv.hpp"
#include "s4nd/error.hpp"
#include "s4nd/rng.hpp"

namespace fs = std::filesystem;

namespace s4nd {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

Tensor<double> scalar_record(double v) { return Tensor<double>(Shape{1}, std::vector<double>{v}); }

double read_scalar(std::span<const CheckpointRecord> records, const std::string& name) {
  const auto* r = find_record(records, name);
  if (!r || r->value.size() != 1) throw FormatError("checkpoint lacks record " + name);
  return r->value[0];
}

std::vector<double> geometry_of(const NetworkConfig& n) {
  return {static_cast<double>(n.input_shape[0]), static_cast<double>(n.input_shape[1]),
          static_cast<double>(n.input_shape[2]), static_cast<double>(n.grid_shape[0]),
          static_cast<double>(n.grid_shape[1]), static_cast<double>(n.grid_shape[2])};
}

void check_geometry(std::span<const CheckpointRecord> records, const NetworkConfig& n, const fs::path& path) {
  const auto* r = find_record(records, "meta.geometry");
  if (!r) throw FormatError(path.string() + ": checkpoint lacks record meta.geometry");
  const auto expect = geometry_of(n);
  if (r->value.size() != 6 || !std::equal(expect.begin(), expect.end(), r->value.data().begin())) {
    std::ostringstream os;
    os << path.string() << ": checkpoint is incompatible with the configured network: it was written for input (";
    for (Index i = 0; i < r->value.size(); ++i) os << (i == 3 ? ") grid (" : i ? "," : "") << r->value[i];
    os << "), config has input (" << n.input_shape[0] << "," << n.input_shape[1] << "," << n.input_shape[2]
       << ") grid (" << n.grid_shape[0] << "," << n.grid_shape[1] << "," << n.grid_shape[2] << ")";
    throw ConfigError(os.str());
  }
}

/// Chunk of `depth` slices starting at z0, zero padded past the end.
Sample crop_chunk(const PreparedScan& scan, Index z0, Index depth) {
  Sample s;
  s.scan_id = scan.id;
  s.z_offset = z0;
  const Index plane = scan.volume.height() * scan.volume.width();
  s.volume = Tensor<double>({1, 1, depth, scan.volume.height(), scan.volume.width()});
  const Index copy = std::min(depth, scan.volume.depth() - z0);
  std::copy_n(scan.volume.data().begin() + z0 * plane, copy * plane, s.volume.data().begin());
  for (const auto& a : scan.annotations) {
    const Index z = a.nearest_voxel()[2];
    if (z < z0 || z >= z0 + copy) continue;
    VoxelAnnotation local = a;
    local.voxel.z -= static_cast<double>(z0);
    s.annotations.push_back(local);
  }
  return s;
}

/// For scans deeper than one chunk: one crop per nodule at a random z offset
/// that keeps the nodule inside, so nodules do not always sit at the same
/// depth within a chunk.
std::vector<Sample> nodule_crops(const std::vector<PreparedScan>& scans, Index depth, std::mt19937_64& rng) {
  std::vector<Sample> out;
  for (const auto& s : scans) {
    const Index d = s.volume.depth();
    if (d <= depth) continue;
    for (const auto& a : s.annotations) {
      const Index z = a.nearest_voxel()[2];
      if (z < 0 || z >= d) continue;
      const Index lo = std::max<Index>(0, z - depth + 1), hi = std::min(z, d - depth);
      out.push_back(crop_chunk(s, std::uniform_int_distribution<Index>(lo, hi)(rng), depth));
    }
  }
  return out;
}

template <std::floating_point T>
[[noreturn]] void dump_and_throw(const TrainOptions& options, const std::vector<const Sample*>& batch,
                                 const Tensor<double>& input, const Tensor<T>& pred, double loss, int epoch,
                                 Index iteration) {
  std::ostringstream os;
  os << "non-finite loss " << loss << " at epoch " << epoch << ", iteration " << iteration << "\n";
  for (const auto* s : batch) os << "  sample " << s->scan_id << " z_offset " << s->z_offset << "\n";
  auto stats = [&](const char* name, auto begin, auto end) {
    double lo = INFINITY, hi = -INFINITY;
    Index bad = 0;
    for (auto it = begin; it != end; ++it) {
      const double v = static_cast<double>(*it);
      if (!std::isfinite(v)) {
        ++bad;
        continue;
      }
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    os << "  " << name << ": min " << lo << " max " << hi << " non-finite " << bad << "\n";
  };
  stats("input", input.data().begin(), input.data().end());
  stats("prediction", pred.data().begin(), pred.data().end());
  std::string where;
  if (!options.out_dir.empty()) {
    fs::create_directories(options.out_dir);
    const fs::path text = options.out_dir / "nonfinite_batch.txt";
    write_file_atomic(text, os.str());
    VolumeMeta m;
    m.dims = {input.width(), input.height(), input.depth() * input.batch()};
    m.element_type = ElementType::met_float;
    write_metaimage(options.out_dir / "nonfinite_batch.mhd", input.reshaped(m.tensor_shape()), m);
    where = " (batch dumped to " + text.string() + ")";
  }
  throw NumericError(os.str() + where);
}

void write_manifest(const fs::path& path, const RunConfig& config, const TrainOptions& options,
                    const TrainResult& result, const std::string& status, double total_seconds) {
  nlohmann::json j;
  j["status"] = status;
  j["config"] = format_config(config);
  j["seed"] = config.train.seed;
  j["precision"] = options.precision;
  j["threads"] = options.threads;
  j["dataset_fingerprint"] = options.dataset_fingerprint;
  j["iterations"] = result.iterations;
  auto epochs = nlohmann::json::array();
  for (const auto& e : result.epochs) {
    nlohmann::json r;
    r["epoch"] = e.epoch;
    r["loss"] = e.loss;
    r["train_cpm"] = e.train_cpm ? nlohmann::json(*e.train_cpm) : nlohmann::json(nullptr);
    r["lr"] = e.lr;
    r["iterations"] = e.iterations;
    r["seconds"] = e.seconds;
    epochs.push_back(r);
  }
  j["epochs"] = epochs;
  j["step_losses"] = result.step_losses;
  j["checkpoints"] = {{"last", (options.out_dir / "last.ckpt").string()},
                      {"best", (options.out_dir / "best.ckpt").string()}};
  j["best"] = {{"cpm", result.best_cpm}, {"epoch", result.best_epoch}};
  j["reached_target"] = result.reached_target;
  j["timings"] = {{"total_seconds", total_seconds}};
  write_file_atomic(path, j.dump(2) + "\n");
}

}  // namespace

template <std::floating_point T>
std::vector<CheckpointRecord> training_checkpoint(Network<T>& network, const SgdOptimizer<T>& optimizer, int epoch,
                                                  Index iterations, double best_cpm, int best_epoch) {
  auto records = network.state_records();
  for (const auto& [name, v] : optimizer.state()) records.push_back({name + ".momentum", v.template cast<double>()});
  const auto g = geometry_of(network.config());
  records.push_back({"meta.geometry", Tensor<double>(Shape{6}, g)});
  records.push_back({"meta.epoch", scalar_record(epoch)});
  records.push_back({"meta.iterations", scalar_record(static_cast<double>(iterations))});
  records.push_back({"meta.best_cpm", scalar_record(best_cpm)});
  records.push_back({"meta.best_epoch", scalar_record(best_epoch)});
  return records;
}

template <std::floating_point T>
void load_network_checkpoint(Network<T>& network, const fs::path& path) {
  const auto records = read_checkpoint(path);
  check_geometry(records, network.config(), path);
  network.load_state_records(records);
}

template <std::floating_point T>
TrainResult train_network(Network<T>& network, const RunConfig& config, const std::vector<PreparedScan>& scans,
                          const TrainOptions& options) {
  validate_run(config);
  if (scans.empty()) throw ConfigError("training needs at least one scan");
  const auto& tc = config.train;
  const auto& nc = network.config();
  const auto t0 = Clock::now();

  SgdOptimizer<T> optimizer(tc.momentum, tc.weight_decay);
  auto params = network.parameters();
  TrainResult result;
  int start_epoch = 0;

  if (!options.resume_from.empty()) {
    const auto records = read_checkpoint(options.resume_from);
    check_geometry(records, nc, options.resume_from);
    network.load_state_records(records);
    std::vector<std::pair<std::string, Tensor<T>>> velocity;
    for (auto* p : params)
      if (const auto* r = find_record(records, p->name + ".momentum")) velocity.emplace_back(p->name, r->value.template cast<T>());
    optimizer.load_state(velocity);
    start_epoch = static_cast<int>(read_scalar(records, "meta.epoch"));
    result.iterations = static_cast<Index>(read_scalar(records, "meta.iterations"));
    result.best_cpm = read_scalar(records, "meta.best_cpm");
    result.best_epoch = static_cast<int>(read_scalar(records, "meta.best_epoch"));
  }
  if (!options.out_dir.empty()) fs::create_directories(options.out_dir);

  const auto base_samples = make_samples(scans, config);
  const GridGeometry geometry = GridGeometry::make(nc.input_shape, nc.grid_shape);
  BceOptions bce;
  bce.pos_weight = tc.pos_weight;
  bce.neg_weight = tc.neg_weight;
  bce.max_auto_pos_weight = tc.max_pos_weight;
  bce.one_sided = tc.one_sided_loss;
  bce.mean = !tc.sum_loss;

  const Index depth = nc.input_shape[2], height = nc.input_shape[1], width = nc.input_shape[0];
  const Index volume = depth * height * width, cells = geometry.cell_count();
  bool stop = false;

  for (int epoch = start_epoch; epoch < tc.epochs && !stop; ++epoch) {
    const auto e0 = Clock::now();
    const double lr = step_decay_lr(tc.lr, tc.lr_decay_factor, tc.lr_decay_epochs, epoch);
    const std::string tag = std::to_string(epoch);
    std::mt19937_64 crop_rng(derive_seed(tc.seed, "crop-" + tag));
    std::mt19937_64 shuffle_rng(derive_seed(tc.seed, "shuffle-" + tag));
    std::mt19937_64 augment_rng(derive_seed(tc.seed, "augment-" + tag));

    std::vector<Sample> crops = nodule_crops(scans, depth, crop_rng);
    std::vector<const Sample*> pool;
    for (const auto& s : base_samples) pool.push_back(&s);
    for (const auto& s : crops) pool.push_back(&s);
    std::shuffle(pool.begin(), pool.end(), shuffle_rng);

    double loss_sum = 0.0;
    Index steps = 0;
    for (std::size_t b0 = 0; b0 < pool.size() && !stop; b0 += static_cast<std::size_t>(tc.batch_size)) {
      const std::size_t b1 = std::min(pool.size(), b0 + static_cast<std::size_t>(tc.batch_size));
      const std::vector<const Sample*> batch(pool.begin() + static_cast<std::ptrdiff_t>(b0),
                                             pool.begin() + static_cast<std::ptrdiff_t>(b1));
      const Index n = static_cast<Index>(batch.size());
      Tensor<double> input({n, 1, depth, height, width});
      Tensor<T> labels({n, 1, geometry.grid[2], geometry.grid[1], geometry.grid[0]});
      for (Index i = 0; i < n; ++i) {
        const Sample& s = *batch[static_cast<std::size_t>(i)];
        const Tensor<double>* vol = &s.volume;
        std::vector<VoxelAnnotation> ann = s.annotations;
        ShiftedSample shifted;
        if (tc.augment_prob > 0.0 && std::bernoulli_distribution(tc.augment_prob)(augment_rng)) {
          const auto dir = static_cast<ShiftDirection>(std::uniform_int_distribution<int>(0, 3)(augment_rng));
          const Index extent = (dir == ShiftDirection::pos_x || dir == ShiftDirection::neg_x) ? width : height;
          shifted = shift_augment(s.volume, ann, dir, std::min(tc.augment_shift, extent - 1));
          vol = &shifted.volume;
          ann = std::move(shifted.annotations);
        }
        std::copy_n(vol->data().begin(), volume, input.data().begin() + i * volume);
        const GridLabels gl = encode_labels(ann, geometry);
        for (Index c = 0; c < cells; ++c) labels[i * cells + c] = static_cast<T>(gl.grid[c]);
      }

      Tape<T> tape;
      const Var x = tape.constant(input.cast<T>());
      const Var pred = network.forward(tape, x, NormMode::train);
      const Var loss = weighted_bce(tape, pred, labels, bce);
      const double value = static_cast<double>(tape.value(loss)[0]);
      if (!std::isfinite(value)) dump_and_throw(options, batch, input, tape.value(pred), value, epoch + 1, result.iterations + 1);
      tape.backward(loss);
      optimizer.step(params, lr);
      ++result.iterations;
      ++steps;
      loss_sum += value;
      result.step_losses.push_back(value);
      if (tc.max_iterations > 0 && result.iterations >= tc.max_iterations) stop = true;
    }

    EpochMetrics m;
    m.epoch = epoch + 1;
    m.loss = steps ? loss_sum / static_cast<double>(steps) : 0.0;
    m.lr = lr;
    m.iterations = result.iterations;
    const bool last = stop || epoch + 1 == tc.epochs;
    const bool target_possible = tc.target_loss > 0.0 && m.loss < tc.target_loss;
    if ((epoch + 1) % tc.eval_every == 0 || last || target_possible) {
      m.train_cpm = evaluate_network(network, scans, config).report.cpm.score;
      if (*m.train_cpm > result.best_cpm) {
        result.best_cpm = *m.train_cpm;
        result.best_epoch = m.epoch;
        if (!options.out_dir.empty()) {
          write_checkpoint(options.out_dir / "best.ckpt",
                           training_checkpoint(network, optimizer, epoch + 1, result.iterations, result.best_cpm,
                                               result.best_epoch));
        }
      }
      if (target_possible && *m.train_cpm == 1.0) {
        result.reached_target = true;
        stop = true;
      }
    }
    m.seconds = seconds_since(e0);
    result.epochs.push_back(m);
    if (!options.out_dir.empty()) {
      write_checkpoint(options.out_dir / "last.ckpt",
                       training_checkpoint(network, optimizer, epoch + 1, result.iterations, result.best_cpm,
                                           result.best_epoch));
      write_manifest(options.out_dir / "manifest.json", config, options, result, "running", seconds_since(t0));
    }
    if (options.on_epoch) options.on_epoch(m);
  }
  if (!options.out_dir.empty()) {
    write_manifest(options.out_dir / "manifest.json", config, options, result, "complete", seconds_since(t0));
  }
  return result;
}

// ---- Ablation -------------------------------------------------------------

std::string AblationResult::csv() const {
  std::ostringstream os;
  os << std::setprecision(6) << "mode,seed,sensitivity,cpm,parameters\n";
  for (const auto& r : rows) {
    os << to_string(r.mode) << ',' << r.seed << ',' << r.sensitivity << ',' << r.cpm << ',' << r.parameters << '\n';
  }
  for (auto mode : {DownsampleMode::maxpool, DownsampleMode::stride2conv, DownsampleMode::avgpool}) {
    double sens = 0.0, cpm_sum = 0.0;
    Index count = 0, parameters = 0;
    for (const auto& r : rows) {
      if (r.mode != mode) continue;
      sens += r.sensitivity;
      cpm_sum += r.cpm;
      parameters = r.parameters;
      ++count;
    }
    if (count == 0) continue;
    os << to_string(mode) << ",mean," << sens / static_cast<double>(count) << ','
       << cpm_sum / static_cast<double>(count) << ',' << parameters << '\n';
  }
  return os.str();
}

double AblationResult::mean_cpm(DownsampleMode mode) const {
  double sum = 0.0;
  int n = 0;
  for (const auto& r : rows)
    if (r.mode == mode) {
      sum += r.cpm;
      ++n;
    }
  return n ? sum / n : 0.0;
}

template <std::floating_point T>
AblationResult run_ablation(const RunConfig& config, const std::vector<PreparedScan>& scans,
                            const std::function<void(const std::string&)>& log) {
  validate_run(config);
  if (scans.size() < 2) throw ConfigError("ablation needs at least two scans");
  AblationResult result;
  std::vector<std::string> ids;
  for (const auto& s : scans) ids.push_back(s.id);
  const Index k = std::min<Index>(5, static_cast<Index>(ids.size()));
  const auto folds = kfold_split(ids, k, config.train.seed);
  result.test_ids = folds[0];
  std::vector<PreparedScan> train, test;
  for (const auto& s : scans) {
    const bool held_out = std::find(folds[0].begin(), folds[0].end(), s.id) != folds[0].end();
    (held_out ? test : train).push_back(s);
    if (!held_out) result.train_ids.push_back(s.id);
  }

  for (int i = 0; i < config.train.ablate_seeds; ++i) {
    const std::uint64_t seed = config.train.seed + static_cast<std::uint64_t>(i);
    for (auto mode : {DownsampleMode::maxpool, DownsampleMode::avgpool, DownsampleMode::stride2conv}) {
      RunConfig arm = config;
      arm.network.downsample_mode = mode;
      arm.train.seed = seed;
      if (config.train.ablate_epochs > 0) arm.train.epochs = config.train.ablate_epochs;
      Network<T> net(arm.network, seed);
      train_network(net, arm, train);
      const Evaluation ev = evaluate_network(net, test, arm);
      result.rows.push_back({mode, seed, ev.sensitivity, ev.report.cpm.score, net.count_parameters()});
      if (log) {
        std::ostringstream os;
        os << "ablate " << to_string(mode) << " seed " << seed << ": CPM " << ev.report.cpm.score << ", sensitivity "
           << ev.sensitivity;
        log(os.str());
      }
    }
  }
  return result;
}

// ---- Gradient checks --------------------------------------------------------

GradCheckResult network_gradcheck(const NetworkConfig& config, std::uint64_t seed, Index samples, double eps) {
  Network<double> net(config, seed);
  std::mt19937_64 rng(derive_seed(seed, "gradcheck"));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const auto& s = config.input_shape;
  Tensor<double> input({2, 1, s[2], s[1], s[0]});
  for (Index i = 0; i < input.size(); ++i) input[i] = u(rng);
  const GridGeometry g = GridGeometry::make(config.input_shape, config.grid_shape);
  Tensor<double> labels({2, 1, g.grid[2], g.grid[1], g.grid[0]});
  for (Index i = 0; i < labels.size(); ++i) labels[i] = u(rng) < 0.05 ? 1.0 : 0.0;
  BceOptions bce;
  bce.pos_weight = 5.0;

  auto params = net.parameters();
  // Conv biases directly followed by batch norm cancel out of the loss.
  std::vector<std::pair<std::size_t, Index>> pool;
  for (std::size_t p = 0; p < params.size(); ++p) {
    const std::string& name = params[p]->name;
    const bool inert = name.ends_with(".conv.bias") && name.rfind("head", 0) != 0 &&
                       name.find("downsample") == std::string::npos;
    if (inert) continue;
    for (Index e = 0; e < params[p]->size(); ++e) pool.emplace_back(p, e);
  }
  std::shuffle(pool.begin(), pool.end(), rng);

  // Loss and branch signature of one forward pass through the tape.
  auto evaluate_loss = [&]() {
    Tape<double> tape;
    const Var pred = net.forward(tape, tape.constant(input), NormMode::train);
    const Var loss = weighted_bce(tape, pred, labels, bce);
    return std::pair{tape.value(loss)[0], tape.branch_signature()};
  };
  std::uint64_t base_signature = 0;
  {
    Tape<double> tape;
    const Var pred = net.forward(tape, tape.constant(input), NormMode::train);
    const Var loss = weighted_bce(tape, pred, labels, bce);
    base_signature = tape.branch_signature();
    tape.backward(loss);
  }
  GradCheckResult r;
  r.name = "network";
  double worst = 0.0;
  Index checked = 0;
  // A parameter whose +-eps step moves some relu input across zero or changes
  // a pooling argmax sits on a kink; it is skipped and the next one drawn.
  for (const auto& [p, e] : pool) {
    if (checked == samples) break;
    double& w = params[p]->value[e];
    const double orig = w;
    w = orig + eps;
    const auto [up, up_signature] = evaluate_loss();
    w = orig - eps;
    const auto [down, down_signature] = evaluate_loss();
    w = orig;
    if (up_signature != base_signature || down_signature != base_signature) continue;
    const double numeric = (up - down) / (2 * eps);
    worst = std::max(worst, relative_error(params[p]->grad[e], numeric));
    ++checked;
  }
  r.inputs = {"sampled parameters"};
  r.max_rel_error = {worst};
  r.checked = {checked};
  return r;
}

template TrainResult train_network(Network<float>&, const RunConfig&, const std::vector<PreparedScan>&,
                                   const TrainOptions&);
template TrainResult train_network(Network<double>&, const RunConfig&, const std::vector<PreparedScan>&,
                                   const TrainOptions&);
template std::vector<CheckpointRecord> training_checkpoint(Network<float>&, const SgdOptimizer<float>&, int, Index,
                                                           double, int);
template std::vector<CheckpointRecord> training_checkpoint(Network<double>&, const SgdOptimizer<double>&, int, Index,
                                                           double, int);
template void load_network_checkpoint(Network<float>&, const fs::path&);
template void load_network_checkpoint(Network<double>&, const fs::path&);
template AblationResult run_ablation<float>(const RunConfig&, const std::vector<PreparedScan>&,
                                            const std::function<void(const std::string&)>&);
template AblationResult run_ablation<double>(const RunConfig&, const std::vector<PreparedScan>&,
                                             const std::function<void(const std::string&)>&);

}  // namespace s4nd
