#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "s4nd/cli.hpp"
#include "s4nd/data_io.hpp"
#include "s4nd/froc.hpp"

using namespace s4nd;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("s4nd_cli_" + tag + "_" + std::to_string(std::random_device{}()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

struct Run {
  int code;
  std::string out, err;
};

Run cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

void write_text(const fs::path& p, const std::string& s) { std::ofstream(p) << s; }

const std::string kTinyConfig =
    "input_shape = 32 32 8\ngrid_shape = 8 8 8\ngrowth_rates = 4 4\nblock_depths = 2 2\n"
    "stem_channels = 8\nstem_stride = 2 2 1\ndownsample_stride = 2 2 1\nepochs = 1\nlr_decay_epochs = none\n";

const std::string kTinyPhantoms =
    "dims = 32 32 8\nspacing = 1 1 2\nnodule_count = 1 2\nnodule_diameter_mm = 3 6\nvessel_count = 1 2\n"
    "vessel_radius_mm = 0.5 1\nnoise_hu = 20\nbackground_hu = -1000 -1000\nparenchyma_hu = -900 -800\n"
    "nodule_hu = -100 100\nvessel_hu = -150 0\nedge_mm = 0.4\nseed = 5\n";

}  // namespace

TEST_CASE("usage errors exit with 1") {
  CHECK(cli({}).code == kExitUsage);
  CHECK(cli({"frobnicate"}).code == kExitUsage);
  CHECK(cli({"train", "--data", "x"}).code == kExitUsage);  // --config missing
  CHECK(cli({"gradcheck", "--precision", "f16"}).code == kExitUsage);

  TempDir dir("usage");
  write_text(dir.path / "run.cfg", kTinyConfig);
  const Run r = cli({"train", "--config", (dir.path / "run.cfg").string(), "--data", (dir.path / "nope").string(),
                     "--out", (dir.path / "o").string()});
  CHECK(r.code == kExitUsage);
  CHECK(r.err.find("not a directory") != std::string::npos);

  write_text(dir.path / "bad.cfg", "input_shape = 32 32 8\ngrid_shape = 3 3 8\n");
  CHECK(cli({"train", "--config", (dir.path / "bad.cfg").string(), "--data", dir.path.string(), "--out",
             (dir.path / "o").string()})
            .code == kExitUsage);
}

TEST_CASE("help exits with 0") {
  const Run r = cli({"--help"});
  CHECK(r.code == kExitOk);
  CHECK(r.out.find("predict") != std::string::npos);
}

TEST_CASE("malformed data exits with 2") {
  TempDir dir("data");
  write_text(dir.path / "run.cfg", kTinyConfig);
  write_text(dir.path / "scan.mhd", "ObjectType = Image\nNDims = 3\n");
  write_text(dir.path / "annotations.csv", "seriesuid,coordX,coordY,coordZ,diameter_mm\n");
  const Run r = cli({"predict", "--config", (dir.path / "run.cfg").string(), "--checkpoint",
                     (dir.path / "run.cfg").string(), "--scan", (dir.path / "scan.mhd").string(), "--out",
                     (dir.path / "o").string()});
  CHECK(r.code != kExitOk);

  write_text(dir.path / "c.csv", "seriesuid,cellX,cellY,cellZ,probability\na,1,2,zz,0.5\n");
  fs::create_directories(dir.path / "scans");
  const Run e = cli({"eval", "--config", (dir.path / "run.cfg").string(), "--candidates", (dir.path / "c.csv").string(),
                     "--annotations", (dir.path / "annotations.csv").string(), "--data", (dir.path / "scans").string()});
  CHECK(e.code == kExitData);
}

TEST_CASE("phantom, train, predict and eval end to end") {
  TempDir dir("e2e");
  const auto cfg = (dir.path / "run.cfg").string();
  const auto spec = (dir.path / "phantom.cfg").string();
  const auto data = (dir.path / "data").string();
  write_text(cfg, kTinyConfig);
  write_text(spec, kTinyPhantoms);

  Run r = cli({"phantom", "--config", spec, "--out", data, "--count", "3"});
  REQUIRE(r.code == kExitOk);
  CHECK(fs::exists(dir.path / "data" / "phantom_002.mhd"));
  CHECK(fs::exists(dir.path / "data" / "annotations.csv"));

  r = cli({"train", "--config", cfg, "--data", data, "--out", (dir.path / "run").string(), "--threads", "1"});
  REQUIRE(r.code == kExitOk);
  CHECK(r.out.find("epoch 1") != std::string::npos);
  CHECK(fs::exists(dir.path / "run" / "manifest.json"));

  r = cli({"predict", "--config", cfg, "--checkpoint", (dir.path / "run" / "last.ckpt").string(), "--data", data,
           "--out", (dir.path / "pred").string()});
  REQUIRE(r.code == kExitOk);
  const MetaImage grid = read_metaimage(dir.path / "pred" / "phantom_000_grid.mhd");
  CHECK(grid.meta.dims == std::array<Index, 3>{8, 8, 8});
  const auto candidates = read_candidates_csv(dir.path / "pred" / "candidates.csv");
  CHECK(candidates.size() > 0);

  r = cli({"eval", "--config", cfg, "--candidates", (dir.path / "pred" / "candidates.csv").string(), "--annotations",
           (dir.path / "data" / "annotations.csv").string(), "--data", data, "--out", (dir.path / "ev").string()});
  REQUIRE(r.code == kExitOk);
  CHECK(r.out.find("CPM") != std::string::npos);
  CHECK(fs::exists(dir.path / "ev" / "froc.csv"));

  // The same candidates fed twice are a duplicate-candidate error.
  auto doubled = candidates;
  doubled.insert(doubled.end(), candidates.begin(), candidates.end());
  write_candidates_csv(dir.path / "dup.csv", doubled);
  r = cli({"eval", "--config", cfg, "--candidates", (dir.path / "dup.csv").string(), "--annotations",
           (dir.path / "data" / "annotations.csv").string(), "--data", data});
  CHECK(r.code == kExitData);
}

TEST_CASE("gradcheck subcommand passes on the default small network") {
  const Run r = cli({"gradcheck", "--seed", "2"});
  CHECK(r.code == kExitOk);
  CHECK(r.out.find("FAIL") == std::string::npos);
}
