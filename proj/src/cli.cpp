#include "s4nd/cli.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <sstream>

#include "s4nd/csv.hpp"
#include "s4nd/error.hpp"
#include "s4nd/parallel.hpp"
#include "s4nd/trainer.hpp"

namespace fs = std::filesystem;

namespace s4nd {

namespace {

struct Common {
  std::string config;
  std::string data;
  std::string out;
  std::optional<std::uint64_t> seed;
  int threads = 0;
  std::string precision = "f64";
};

struct Args {
  Common common;
  std::string checkpoint;
  std::string scan;
  std::string resume;
  std::string candidates;
  std::string annotations;
  Index count = 10;
};

void add_common(CLI::App* cmd, Common& c, bool config_required, bool data, bool out) {
  cmd->add_option("--config", c.config, "Run configuration file")->required(config_required);
  if (data) cmd->add_option("--data", c.data, "Directory of .mhd/.raw scans and annotations.csv");
  if (out) cmd->add_option("--out", c.out, "Output directory");
  cmd->add_option("--seed", c.seed, "Override the configured seed");
  cmd->add_option("--threads", c.threads, "Worker threads (default: S4ND_THREADS or all cores)")
      ->check(CLI::NonNegativeNumber);
  cmd->add_option("--precision", c.precision, "Floating-point precision")->check(CLI::IsMember({"f32", "f64"}));
}

void require_dir(const std::string& path, const char* flag) {
  if (path.empty()) throw ConfigError(std::string(flag) + " is required");
  if (!fs::is_directory(path)) throw ConfigError(std::string(flag) + " " + path + " is not a directory");
}

void require_file(const std::string& path, const char* flag) {
  if (path.empty()) throw ConfigError(std::string(flag) + " is required");
  if (!fs::is_regular_file(path)) throw ConfigError(std::string(flag) + " " + path + " does not exist");
}

RunConfig load_run_config(const Common& c) {
  require_file(c.config, "--config");
  RunConfig cfg = load_config(c.config);
  if (c.seed) cfg.train.seed = *c.seed;
  validate_run(cfg);
  return cfg;
}

int apply_threads(const Common& c) {
  int n = c.threads;
  if (n == 0) n = thread_count_from_env();
  if (n > 0) set_thread_count(n);
  return thread_count();
}

std::string fixed(double v, int digits = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

template <std::floating_point T>
int train_cmd(const Args& a, std::ostream& out) {
  const auto& c = a.common;
  const RunConfig cfg = load_run_config(c);
  require_dir(c.data, "--data");
  if (c.out.empty()) throw ConfigError("--out is required");
  const int threads = apply_threads(c);
  const auto scans = prepare_scans(load_dataset(c.data), cfg);
  Network<T> net(cfg.network, cfg.train.seed);
  out << "training " << scans.size() << " scans, " << net.count_parameters() << " parameters, precision "
      << c.precision << ", threads " << threads << "\n";
  TrainOptions opt;
  opt.out_dir = c.out;
  opt.resume_from = a.resume;
  opt.dataset_fingerprint = dataset_fingerprint(c.data);
  opt.precision = c.precision;
  opt.threads = threads;
  opt.on_epoch = [&](const EpochMetrics& m) {
    out << "epoch " << m.epoch << "  loss " << fixed(m.loss, 6) << "  lr " << m.lr << "  iterations " << m.iterations;
    if (m.train_cpm) out << "  train CPM " << fixed(*m.train_cpm);
    out << "  (" << fixed(m.seconds, 1) << " s)\n" << std::flush;
  };
  const TrainResult r = train_network(net, cfg, scans, opt);
  out << "best train CPM " << fixed(r.best_cpm) << " at epoch " << r.best_epoch << "; checkpoints in " << c.out
      << "\n";
  return kExitOk;
}

/// Grid as a MetaImage whose voxels are cells, centred on the cell centres.
void write_grid(const fs::path& path, const Tensor<double>& grid, const PreparedScan& scan, const GridGeometry& g) {
  VolumeMeta m;
  m.dims = g.grid;
  m.spacing = {scan.meta.spacing.x * static_cast<double>(g.cell[0]), scan.meta.spacing.y * static_cast<double>(g.cell[1]),
               scan.meta.spacing.z * static_cast<double>(g.cell[2])};
  m.origin = scan.meta.voxel_to_world({(static_cast<double>(g.cell[0]) - 1) / 2, (static_cast<double>(g.cell[1]) - 1) / 2,
                                       (static_cast<double>(g.cell[2]) - 1) / 2});
  m.element_type = ElementType::met_float;
  write_metaimage(path, grid, m);
}

template <std::floating_point T>
int predict_cmd(const Args& a, std::ostream& out) {
  const auto& c = a.common;
  const RunConfig cfg = load_run_config(c);
  require_file(a.checkpoint, "--checkpoint");
  if (c.out.empty()) throw ConfigError("--out is required");
  if (a.scan.empty() == c.data.empty()) throw ConfigError("give exactly one of --scan or --data");
  apply_threads(c);

  std::vector<Scan> raw;
  if (!a.scan.empty()) {
    require_file(a.scan, "--scan");
    MetaImage img = read_metaimage(a.scan);
    raw.push_back({fs::path(a.scan).stem().string(), std::move(img.volume), img.meta, {}});
  } else {
    require_dir(c.data, "--data");
    raw = load_dataset(c.data);
  }
  Network<T> net(cfg.network, cfg.train.seed);
  load_network_checkpoint(net, a.checkpoint);
  fs::create_directories(c.out);

  std::vector<Candidate> all;
  for (const auto& s : raw) {
    const PreparedScan p = prepare_scan(s, cfg);
    const Tensor<double> grid = predict_scan(net, p, cfg);
    write_grid(fs::path(c.out) / (p.id + "_grid.mhd"), grid, p, scan_grid_geometry(p.volume.depth(), cfg.network));
    auto cand = extract_candidates(grid, p.id, cfg.train.candidate_floor);
    double best = 0.0;
    for (Index i = 0; i < grid.size(); ++i) best = std::max(best, grid[i]);
    out << p.id << ": " << cand.size() << " candidates, max probability " << fixed(best) << "\n";
    all.insert(all.end(), cand.begin(), cand.end());
  }
  write_candidates_csv(fs::path(c.out) / "candidates.csv", all);
  out << "wrote " << (fs::path(c.out) / "candidates.csv").string() << "\n";
  return kExitOk;
}

int eval_cmd(const Args& a, std::ostream& out) {
  const auto& c = a.common;
  const RunConfig cfg = load_run_config(c);
  require_file(a.candidates, "--candidates");
  require_file(a.annotations, "--annotations");
  require_dir(c.data, "--data");

  std::vector<GroundTruthNodule> truth;
  const auto annotations = read_annotations_csv(a.annotations);
  const auto headers = list_scans(c.data);
  for (const auto& h : headers) {
    Scan s;
    s.id = h.stem().string();
    MetaImage img = read_metaimage(h);
    s.volume = std::move(img.volume);
    s.meta = img.meta;
    for (const auto& an : annotations)
      if (an.scan_id == s.id) s.annotations.push_back(an);
    const auto gt = scan_ground_truth(prepare_scan(s, cfg), cfg.network);
    truth.insert(truth.end(), gt.begin(), gt.end());
  }
  const FrocReport report = evaluate(read_candidates_csv(a.candidates), truth, static_cast<Index>(headers.size()));
  out << format_report(report);
  if (!c.out.empty()) {
    fs::create_directories(c.out);
    write_file_atomic(fs::path(c.out) / "froc.csv", format_report_csv(report));
  }
  return kExitOk;
}

template <std::floating_point T>
int ablate_cmd(const Args& a, std::ostream& out) {
  const auto& c = a.common;
  const RunConfig cfg = load_run_config(c);
  require_dir(c.data, "--data");
  if (c.out.empty()) throw ConfigError("--out is required");
  apply_threads(c);
  const auto scans = prepare_scans(load_dataset(c.data), cfg);
  const AblationResult r = run_ablation<T>(cfg, scans, [&](const std::string& line) { out << line << "\n" << std::flush; });
  fs::create_directories(c.out);
  write_file_atomic(fs::path(c.out) / "ablation.csv", r.csv());
  out << r.csv();
  return kExitOk;
}

int gradcheck_cmd(const Args& a, std::ostream& out) {
  const auto& c = a.common;
  apply_threads(c);
  constexpr double kOpThreshold = 1e-6, kNetworkThreshold = 1e-4;
  const std::uint64_t seed = c.seed.value_or(1);
  bool ok = true;
  out << std::left << std::setw(22) << "check" << std::setw(14) << "max rel err" << "threshold  result\n";
  for (const auto& r : run_operation_gradchecks(seed)) {
    const bool pass = r.passed(kOpThreshold);
    ok = ok && pass;
    out << std::setw(22) << r.name << std::setw(14) << std::scientific << std::setprecision(3) << r.worst()
        << std::setw(11) << kOpThreshold << (pass ? "pass" : "FAIL") << "\n";
  }
  NetworkConfig net;
  if (!c.config.empty()) {
    require_file(c.config, "--config");
    net = load_config(c.config).network;
  } else {
    net = parse_config("input_shape = 64 64 8\ngrid_shape = 8 8 8\ngrowth_rates = 8 8\nblock_depths = 4 4\n"
                       "stem_downsample = 1\n")
              .network;
  }
  const auto r = network_gradcheck(net, seed);
  const bool pass = r.passed(kNetworkThreshold);
  ok = ok && pass;
  out << std::setw(22) << "network (20 params)" << std::setw(14) << r.worst() << std::setw(11) << kNetworkThreshold
      << (pass ? "pass" : "FAIL") << "\n";
  out << std::defaultfloat;
  return ok ? kExitOk : kExitNumeric;
}

int phantom_cmd(const Args& a, std::ostream& out) {
  const auto& c = a.common;
  require_file(c.config, "--config");
  if (c.out.empty()) throw ConfigError("--out is required");
  if (a.count < 0) throw ConfigError("--count must be >= 0");
  PhantomSpec spec = load_phantom_spec(c.config);
  if (c.seed) spec.seed = *c.seed;
  write_phantom_dataset(spec, a.count, c.out);
  out << "wrote " << a.count << " phantoms to " << c.out << " (fingerprint " << dataset_fingerprint(c.out) << ")\n";
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Single-shot 3D nodule detector", "s4nd"};
  app.require_subcommand(1);
  Args a;

  auto* train = app.add_subcommand("train", "Train a detector on a scan directory");
  add_common(train, a.common, true, true, true);
  train->add_option("--resume", a.resume, "Checkpoint to resume from");

  auto* predict = app.add_subcommand("predict", "Write probability grids and candidates for scans");
  add_common(predict, a.common, true, true, true);
  predict->add_option("--checkpoint", a.checkpoint, "Trained checkpoint")->required();
  predict->add_option("--scan", a.scan, "Single .mhd scan (instead of --data)");

  auto* eval = app.add_subcommand("eval", "FROC analysis of a candidate file");
  add_common(eval, a.common, true, true, true);
  eval->add_option("--candidates", a.candidates, "Candidate CSV")->required();
  eval->add_option("--annotations", a.annotations, "Annotation CSV")->required();

  auto* ablate = app.add_subcommand("ablate", "Compare downsampling modes across seeds");
  add_common(ablate, a.common, true, true, true);

  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  add_common(gradcheck, a.common, false, false, false);

  auto* phantom = app.add_subcommand("phantom", "Generate a synthetic phantom dataset");
  add_common(phantom, a.common, true, false, true);
  phantom->add_option("--count", a.count, "Number of phantoms");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n" << "run with --help for usage\n";
    return kExitUsage;
  }

  const bool f32 = a.common.precision == "f32";
  try {
    if (train->parsed()) return f32 ? train_cmd<float>(a, out) : train_cmd<double>(a, out);
    if (predict->parsed()) return f32 ? predict_cmd<float>(a, out) : predict_cmd<double>(a, out);
    if (eval->parsed()) return eval_cmd(a, out);
    if (ablate->parsed()) return f32 ? ablate_cmd<float>(a, out) : ablate_cmd<double>(a, out);
    if (gradcheck->parsed()) return gradcheck_cmd(a, out);
    if (phantom->parsed()) return phantom_cmd(a, out);
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const ParseError& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const FormatError& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const ValidationError& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const fs::filesystem_error& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitUsage;
}

}  // namespace s4nd
