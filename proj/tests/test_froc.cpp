#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "froc_oracle.hpp"
#include "s4nd/error.hpp"
#include "s4nd/froc.hpp"

using namespace s4nd;
namespace fs = std::filesystem;

namespace {

std::array<Index, 3> cell(int c) { return {c % 4, (c / 4) % 4, c / 16}; }

std::vector<Candidate> to_candidates(const oracle::Instance& in) {
  std::vector<Candidate> out;
  for (const auto& c : in.cands) out.push_back({"s" + std::to_string(c.scan), cell(c.cell), c.conf});
  return out;
}

std::vector<GroundTruthNodule> to_nodules(const oracle::Instance& in) {
  std::vector<GroundTruthNodule> out;
  for (const auto& n : in.nods) out.push_back({"s" + std::to_string(n.scan), cell(n.cell)});
  return out;
}

FrocCurve curve_of(std::vector<FrocPoint> p) {
  FrocCurve c;
  c.points = std::move(p);
  c.scan_count = 1;
  c.nodule_count = 1;
  return c;
}

}  // namespace

TEST_CASE("candidate extraction") {
  Tensor<double> g({1, 1, 2, 3, 4}, 1e-6);
  CHECK(extract_candidates(g, "a").empty());
  g.at(0, 0, 1, 2, 3) = 0.9;
  const auto c = extract_candidates(g, "a");
  REQUIRE(c.size() == 1);
  CHECK(c[0].confidence == 0.9);
  CHECK(c[0].cell == std::array<Index, 3>{3, 2, 1});

  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.0, 2e-4);
  for (Index i = 0; i < g.size(); ++i) g[i] = u(rng);
  Index expect = 0;
  for (Index i = 0; i < g.size(); ++i) expect += g[i] >= 1e-4;
  CHECK(static_cast<Index>(extract_candidates(g, "a").size()) == expect);
}

TEST_CASE("matching rules") {
  const std::vector<GroundTruthNodule> gt{{"a", {1, 1, 0}}};
  auto m = match_candidates({{"a", {1, 1, 0}, 0.7}}, gt);
  CHECK(m.true_positive_nodules() == 1);
  CHECK(m.false_positives() == 0);

  m = match_candidates({{"a", {1, 1, 0}, 0.4}, {"a", {1, 1, 0}, 0.9}}, gt, true);
  CHECK(m.labels[0] == MatchLabel::ignored);
  CHECK(m.labels[1] == MatchLabel::true_positive);
  CHECK(m.false_positives() == 0);
  CHECK_THROWS_AS(match_candidates({{"a", {1, 1, 0}, 0.4}, {"a", {1, 1, 0}, 0.9}}, gt), ValidationError);

  m = match_candidates({{"a", {0, 0, 0}, 0.1}, {"a", {1, 1, 0}, 0.2}, {"b", {1, 1, 0}, 0.3}}, gt);
  CHECK(m.true_positive_nodules() == 1);
  CHECK(m.false_positives() == 2);

  // Two nodules in one cell: one candidate credits both.
  const std::vector<GroundTruthNodule> twin{{"a", {2, 0, 0}}, {"a", {2, 0, 0}}};
  m = match_candidates({{"a", {2, 0, 0}, 0.5}}, twin);
  CHECK(m.true_positive_nodules() == 2);
}

TEST_CASE("froc and cpm basic cases") {
  const std::vector<GroundTruthNodule> gt{{"a", {0, 0, 0}}, {"b", {1, 0, 0}}};
  auto perfect = evaluate({{"a", {0, 0, 0}, 1.0}, {"b", {1, 0, 0}, 1.0}}, gt, 2);
  CHECK(perfect.curve.points.front() == FrocPoint{0.0, 1.0});
  CHECK(perfect.cpm.score == 1.0);
  for (double s : perfect.cpm.sensitivities) CHECK(s == 1.0);

  auto empty = evaluate({}, gt, 2);
  CHECK(empty.cpm.score == 0.0);
  CHECK(empty.curve.points.size() == 1);

  CHECK_THROWS_AS(evaluate({}, {}, 2), ValidationError);
  CHECK_THROWS_AS(evaluate({}, gt, 0), ValidationError);
}

TEST_CASE("cpm interpolation fixture") {
  // Hand interpolation of {(0,0.5),(1,0.5),(2,1.0)} at 0.125..8 in FP/scan:
  // the rate 2 lands on the last point, so the upper four rates read 1.0.
  const auto r = cpm(curve_of({{0, 0.5}, {1, 0.5}, {2, 1.0}}));
  const std::array<double, 7> expect{0.5, 0.5, 0.5, 0.5, 1.0, 1.0, 1.0};
  CHECK(r.sensitivities == expect);
  CHECK(r.score == doctest::Approx(5.0 / 7.0).epsilon(1e-15));
  CHECK(sensitivity_at(curve_of({{0, 0.5}, {1, 0.5}, {2, 1.0}}), 1.5) == 0.75);
  CHECK(sensitivity_at(curve_of({{0.5, 0.2}, {1, 0.4}}), 0.25) == 0.0);
  CHECK(sensitivity_at(curve_of({{0, 0.2}, {0, 0.6}, {1, 0.8}}), 0.0) == 0.6);
}

TEST_CASE("hand-built two-scan instance matches brute force") {
  // 2 scans, 3 nodules, 5 candidates with distinct confidences.
  oracle::Instance in;
  in.scans = 2;
  in.nods = {{0, 1}, {0, 5}, {1, 2}};
  in.cands = {{0, 1, 0.95}, {0, 3, 0.8}, {1, 2, 0.6}, {1, 7, 0.5}, {0, 5, 0.3}};
  const auto lib = evaluate(to_candidates(in), to_nodules(in), in.scans);
  const auto ref = oracle::froc_bruteforce(in.cands, in.nods, in.scans);
  REQUIRE(lib.curve.points.size() == ref.points.size());
  for (std::size_t i = 0; i < ref.points.size(); ++i) {
    CHECK(lib.curve.points[i].fp_per_scan == ref.points[i].first);
    CHECK(lib.curve.points[i].sensitivity == ref.points[i].second);
  }
  CHECK(lib.cpm.score == oracle::cpm_bruteforce(ref));
}

TEST_CASE("random instances match brute force") {
  std::mt19937_64 rng(77);
  for (int trial = 0; trial < 200; ++trial) {
    const auto in = oracle::random_instance(rng);
    const auto lib = evaluate(to_candidates(in), to_nodules(in), in.scans);
    const auto ref = oracle::froc_bruteforce(in.cands, in.nods, in.scans);
    REQUIRE(lib.curve.points.size() == ref.points.size());
    for (std::size_t i = 0; i < ref.points.size(); ++i) {
      CHECK(std::abs(lib.curve.points[i].fp_per_scan - ref.points[i].first) <= 1e-12);
      CHECK(std::abs(lib.curve.points[i].sensitivity - ref.points[i].second) <= 1e-12);
    }
    CHECK(std::abs(lib.cpm.score - oracle::cpm_bruteforce(ref)) <= 1e-12);
  }
}

TEST_CASE("froc properties") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const auto in = oracle::random_instance(rng);
    const auto r = evaluate(to_candidates(in), to_nodules(in), in.scans);
    const auto& p = r.curve.points;
    for (std::size_t i = 1; i < p.size(); ++i) {
      CHECK(p[i].fp_per_scan >= p[i - 1].fp_per_scan);
      CHECK(p[i].sensitivity >= p[i - 1].sensitivity);
    }
    const auto [lo, hi] = std::minmax_element(r.cpm.sensitivities.begin(), r.cpm.sensitivities.end());
    CHECK(r.cpm.score >= *lo - 1e-15);
    CHECK(r.cpm.score <= *hi + 1e-15);

    // Strictly increasing transform of confidences leaves everything unchanged.
    auto squashed = to_candidates(in);
    for (auto& c : squashed) c.confidence = std::exp(3 * c.confidence) / 100;
    const auto t = evaluate(squashed, to_nodules(in), in.scans);
    CHECK(t.curve.points == r.curve.points);
    CHECK(t.cpm.score == r.cpm.score);
  }
}

TEST_CASE("pooling two scan sets equals joint evaluation") {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    auto a = oracle::random_instance(rng);
    auto b = oracle::random_instance(rng);
    oracle::Instance joint = a;
    for (auto c : b.cands) joint.cands.push_back({c.scan + a.scans, c.cell, c.conf});
    for (auto n : b.nods) joint.nods.push_back({n.scan + a.scans, n.cell});
    joint.scans = a.scans + b.scans;
    auto cands = to_candidates(a);
    auto nods = to_nodules(a);
    for (auto c : to_candidates(b)) cands.push_back({"t" + c.scan_id, c.cell, c.confidence});
    for (auto n : to_nodules(b)) nods.push_back({"t" + n.scan_id, n.cell});
    const auto lib = evaluate(cands, nods, joint.scans);
    const auto ref = oracle::froc_bruteforce(joint.cands, joint.nods, joint.scans);
    CHECK(std::abs(lib.cpm.score - oracle::cpm_bruteforce(ref)) <= 1e-12);
  }
}

TEST_CASE("candidate CSV and report") {
  const fs::path dir = fs::temp_directory_path() / ("s4nd_froc_" + std::to_string(std::random_device{}()));
  fs::create_directories(dir);
  const std::vector<Candidate> c{{"x", {1, 2, 3}, 0.123456789012345678}, {"y", {0, 0, 0}, 1e-4}};
  write_candidates_csv(dir / "c.csv", c);
  const auto back = read_candidates_csv(dir / "c.csv");
  REQUIRE(back.size() == 2);
  CHECK(back[0].confidence == c[0].confidence);
  CHECK(back[0].cell == c[0].cell);
  std::ofstream(dir / "bad.csv") << kCandidateHeader << "\nx,1,2,3,0.5\nx,1,2.5,3,0.5\n";
  CHECK_THROWS_WITH_AS(read_candidates_csv(dir / "bad.csv"), doctest::Contains("line 3"), ParseError);
  fs::remove_all(dir);

  const auto r = evaluate({{"a", {0, 0, 0}, 0.9}}, std::vector<GroundTruthNodule>{{"a", {0, 0, 0}}}, 1);
  const auto csv = format_report_csv(r);
  CHECK(csv.find("rate,sensitivity\n0.125,1\n") == 0);
  CHECK(csv.find("CPM,1\n") != std::string::npos);
  CHECK(format_report(r).find("CPM") != std::string::npos);
}
