#include <doctest.h>

#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>

#include "s4nd/checkpoint.hpp"
#include "s4nd/error.hpp"
#include "s4nd/parallel.hpp"
#include "s4nd/trainer.hpp"

using namespace s4nd;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("s4nd_test_" + tag + "_" + std::to_string(std::random_device{}()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

// 32x32 input, 8x8x8 grid: stem stride 2 and one pool between two blocks.
RunConfig tiny_config() {
  return parse_config(
      "input_shape = 32 32 8\ngrid_shape = 8 8 8\ngrowth_rates = 4 4\nblock_depths = 2 2\n"
      "stem_channels = 8\nstem_stride = 2 2 1\ndownsample_stride = 2 2 1\n"
      "epochs = 3\nbatch_size = 2\nlr = 0.01\nlr_decay_epochs = none\npos_weight = auto\n"
      "augment_shift = 4\naugment_prob = 0.5\nchunk_depth = 8\nchunk_stride = 8\nseed = 3\n");
}

PhantomSpec tiny_phantoms(Index depth) {
  return parse_phantom_spec(
      "dims = 32 32 " + std::to_string(depth) +
      "\nspacing = 1 1 2\nnodule_count = 1 2\nnodule_diameter_mm = 3 6\nvessel_count = 1 2\n"
      "vessel_radius_mm = 0.5 1\nnoise_hu = 20\nbackground_hu = -1000 -1000\nparenchyma_hu = -900 -800\n"
      "nodule_hu = -100 100\nvessel_hu = -150 0\nedge_mm = 0.4\nseed = 5\n");
}

std::vector<PreparedScan> tiny_scans(const RunConfig& cfg, Index count, Index depth = 8) {
  const PhantomSpec spec = tiny_phantoms(depth);
  std::vector<Scan> scans;
  for (Index i = 0; i < count; ++i) scans.push_back(generate_phantom(spec, "p" + std::to_string(i)));
  return prepare_scans(scans, cfg);
}

}  // namespace

TEST_CASE("run validation ties chunking to the network") {
  RunConfig cfg = tiny_config();
  CHECK_NOTHROW(validate_run(cfg));
  cfg.train.chunk_depth = 16;
  CHECK_THROWS_AS(validate_run(cfg), ConfigError);
  cfg.train.chunk_depth = 8;
  cfg.train.chunk_stride = 4;
  CHECK_NOTHROW(validate_run(cfg));
  cfg.train.chunk_stride = 9;
  CHECK_THROWS_AS(validate_run(cfg), ConfigError);

  // Cells two slices deep: chunk starts must fall on cell boundaries.
  RunConfig coarse = tiny_config();
  coarse.network.grid_shape = {8, 8, 4};
  coarse.network.stem_stride = {2, 2, 2};
  coarse.train.chunk_stride = 4;
  CHECK_NOTHROW(validate_run(coarse));
  coarse.train.chunk_stride = 3;
  CHECK_THROWS_AS(validate_run(coarse), ConfigError);
}

TEST_CASE("scan grid covers every slice") {
  const RunConfig cfg = tiny_config();
  const GridGeometry g = scan_grid_geometry(20, cfg.network);
  CHECK(g.grid == std::array<Index, 3>{8, 8, 20});
  CHECK(g.cell == std::array<Index, 3>{4, 4, 1});
}

TEST_CASE("samples tile deep scans and prediction merges overlapping chunks by maximum") {
  RunConfig cfg = tiny_config();
  cfg.train.chunk_stride = 4;
  const auto scans = tiny_scans(cfg, 1, 14);
  const auto samples = make_samples(scans, cfg);
  REQUIRE(samples.size() == 4);  // offsets 0, 4, 8, 12
  CHECK(samples[3].z_offset == 12);
  for (const auto& s : samples) CHECK(s.volume.shape() == Shape{1, 1, 8, 32, 32});

  Network<double> net(cfg.network, 1);
  const Tensor<double> grid = predict_scan(net, scans[0], cfg);
  REQUIRE(grid.shape() == Shape{1, 1, 14, 8, 8});

  // Reference: run each chunk and keep the maximum per covered cell.
  Tensor<double> expect(Shape{14, 8, 8}, 0.0);
  for (const auto& s : samples) {
    const Tensor<double> p = net.infer(s.volume);
    for (Index z = 0; z < 8 && s.z_offset + z < 14; ++z)
      for (Index y = 0; y < 8; ++y)
        for (Index x = 0; x < 8; ++x) {
          double& e = expect[((s.z_offset + z) * 8 + y) * 8 + x];
          e = std::max(e, p[(z * 8 + y) * 8 + x]);
        }
  }
  for (Index i = 0; i < grid.size(); ++i) REQUIRE(grid[i] == expect[i]);
}

TEST_CASE("training lowers the loss and writes checkpoints and a manifest") {
  const RunConfig cfg = tiny_config();
  const auto scans = tiny_scans(cfg, 4);
  TempDir dir("train");
  Network<double> net(cfg.network, cfg.train.seed);
  TrainOptions opt;
  opt.out_dir = dir.path;
  opt.dataset_fingerprint = "abc";
  int calls = 0;
  opt.on_epoch = [&](const EpochMetrics& m) { CHECK(m.epoch == ++calls); };
  const TrainResult r = train_network(net, cfg, scans, opt);
  CHECK(calls == 3);
  REQUIRE(r.epochs.size() == 3);
  CHECK(r.iterations == 6);
  CHECK(r.step_losses.size() == 6);
  CHECK(r.epochs.back().loss < r.epochs.front().loss);
  CHECK(fs::exists(dir.path / "last.ckpt"));
  CHECK(fs::exists(dir.path / "best.ckpt"));

  std::ifstream in(dir.path / "manifest.json");
  const auto m = nlohmann::json::parse(in);
  CHECK(m["status"] == "complete");
  CHECK(m["dataset_fingerprint"] == "abc");
  CHECK(m["epochs"].size() == 3);

  Network<double> reloaded(cfg.network, 99);
  load_network_checkpoint(reloaded, dir.path / "last.ckpt");
  const Tensor<double> a = net.infer(scans[0].volume.reshaped(Shape{1, 1, 8, 32, 32}));
  const Tensor<double> b = reloaded.infer(scans[0].volume.reshaped(Shape{1, 1, 8, 32, 32}));
  for (Index i = 0; i < a.size(); ++i) REQUIRE(a[i] == b[i]);
}

TEST_CASE("a checkpoint for another geometry is refused") {
  const RunConfig cfg = tiny_config();
  const auto scans = tiny_scans(cfg, 2);
  TempDir dir("geom");
  RunConfig one = cfg;
  one.train.epochs = 1;
  Network<double> net(cfg.network, 1);
  TrainOptions opt;
  opt.out_dir = dir.path;
  train_network(net, one, scans, opt);

  NetworkConfig other = cfg.network;
  other.input_shape = {64, 64, 8};
  other.stem_downsample = 1;
  Network<double> wrong(other, 1);
  CHECK_THROWS_AS(load_network_checkpoint(wrong, dir.path / "last.ckpt"), ConfigError);
}

TEST_CASE("resuming at an epoch boundary reproduces the uninterrupted run") {
  const RunConfig cfg = tiny_config();
  const auto scans = tiny_scans(cfg, 4);

  Network<double> full(cfg.network, cfg.train.seed);
  const TrainResult straight = train_network(full, cfg, scans);

  TempDir dir("resume");
  RunConfig first = cfg;
  first.train.epochs = 1;
  Network<double> part(cfg.network, cfg.train.seed);
  TrainOptions opt;
  opt.out_dir = dir.path;
  train_network(part, first, scans, opt);

  Network<double> resumed(cfg.network, 12345);
  TrainOptions ropt;
  ropt.resume_from = dir.path / "last.ckpt";
  const TrainResult rest = train_network(resumed, cfg, scans, ropt);
  REQUIRE(rest.step_losses.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) CHECK(rest.step_losses[i] == straight.step_losses[i + 2]);
  CHECK(rest.iterations == straight.iterations);

  auto a = full.parameters();
  auto b = resumed.parameters();
  REQUIRE(a.size() == b.size());
  for (std::size_t p = 0; p < a.size(); ++p)
    for (Index i = 0; i < a[p]->value.size(); ++i) REQUIRE(a[p]->value[i] == b[p]->value[i]);
}

TEST_CASE("training is bit-identical across thread counts") {
  RunConfig cfg = tiny_config();
  cfg.train.epochs = 2;
  const auto scans = tiny_scans(cfg, 4);
  const int saved = thread_count();
  std::vector<std::vector<double>> losses;
  for (int threads : {1, 2, 3}) {
    set_thread_count(threads);
    Network<double> net(cfg.network, cfg.train.seed);
    losses.push_back(train_network(net, cfg, scans).step_losses);
  }
  set_thread_count(saved);
  CHECK(losses[0] == losses[1]);
  CHECK(losses[0] == losses[2]);
}

TEST_CASE("a non-finite loss stops training with a dump") {
  const RunConfig cfg = tiny_config();
  const auto scans = tiny_scans(cfg, 2);
  TempDir dir("nan");
  Network<double> net(cfg.network, 1);
  auto params = net.parameters();
  params.back()->value[0] = std::numeric_limits<double>::quiet_NaN();  // head bias
  TrainOptions opt;
  opt.out_dir = dir.path;
  CHECK_THROWS_AS(train_network(net, cfg, scans, opt), NumericError);
  CHECK(fs::exists(dir.path / "nonfinite_batch.txt"));
  CHECK(fs::exists(dir.path / "nonfinite_batch.mhd"));
}

TEST_CASE("single precision training runs") {
  RunConfig cfg = tiny_config();
  cfg.train.epochs = 2;
  const auto scans = tiny_scans(cfg, 2);
  Network<float> net(cfg.network, 1);
  const TrainResult r = train_network(net, cfg, scans);
  for (double l : r.step_losses) CHECK(std::isfinite(l));
}

TEST_CASE("ablation reports every mode and seed with consistent parameter counts") {
  RunConfig cfg = tiny_config();
  cfg.train.ablate_seeds = 2;
  cfg.train.ablate_epochs = 1;
  const auto scans = tiny_scans(cfg, 5);
  const AblationResult r = run_ablation<double>(cfg, scans);
  REQUIRE(r.rows.size() == 6);
  CHECK(r.test_ids.size() == 1);
  CHECK(r.train_ids.size() == 4);

  Index maxpool = 0, avgpool = 0, conv = 0;
  for (const auto& row : r.rows) {
    CHECK(row.cpm >= 0.0);
    CHECK(row.cpm <= 1.0);
    CHECK(row.sensitivity >= 0.0);
    CHECK(row.sensitivity <= 1.0);
    if (row.mode == DownsampleMode::maxpool) maxpool = row.parameters;
    if (row.mode == DownsampleMode::avgpool) avgpool = row.parameters;
    if (row.mode == DownsampleMode::stride2conv) conv = row.parameters;
  }
  CHECK(maxpool == avgpool);
  // One stride-2 3x3x3 conv (with bias) between the blocks: transition width 16.
  CHECK(conv - maxpool == 16 * 16 * 27 + 16);

  const std::string csv = r.csv();
  CHECK(csv.rfind("mode,seed,sensitivity,cpm,parameters\n", 0) == 0);
  CHECK(csv.find("maxpool,mean,") != std::string::npos);
  CHECK(csv.find("stride2conv,mean,") != std::string::npos);
}

TEST_CASE("network gradient check") {
  const RunConfig cfg = tiny_config();
  const GradCheckResult r = network_gradcheck(cfg.network, 7);
  CHECK(r.checked.size() >= 1);
  Index total = 0;
  for (Index n : r.checked) total += n;
  CHECK(total == 20);
  CHECK(r.worst() < 1e-4);
}
