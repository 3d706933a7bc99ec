#include "s4nd/froc.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "s4nd/csv.hpp"
#include "s4nd/error.hpp"

namespace s4nd {

namespace {

/// Ascending linear cell index for cells of the same grid.
bool cell_less(const std::array<Index, 3>& a, const std::array<Index, 3>& b) {
  return std::tie(a[2], a[1], a[0]) < std::tie(b[2], b[1], b[0]);
}

std::string cell_string(const std::array<Index, 3>& c) {
  return "(" + std::to_string(c[0]) + "," + std::to_string(c[1]) + "," + std::to_string(c[2]) + ")";
}

}  // namespace

std::vector<Candidate> extract_candidates(const Tensor<double>& grid, const std::string& scan_id, double floor) {
  require_rank5(grid, "extract_candidates");
  if (grid.batch() != 1 || grid.channels() != 1) throw DimensionError("extract_candidates expects a (1, 1, z, y, x) grid");
  std::vector<Candidate> out;
  for (Index z = 0; z < grid.depth(); ++z)
    for (Index y = 0; y < grid.height(); ++y)
      for (Index x = 0; x < grid.width(); ++x) {
        const double p = grid.at(0, 0, z, y, x);
        if (!std::isfinite(p)) throw NumericError("non-finite probability in grid of scan " + scan_id);
        if (p >= floor) out.push_back({scan_id, {x, y, z}, p});
      }
  return out;
}

std::vector<GroundTruthNodule> ground_truth_cells(std::span<const VoxelAnnotation> annotations,
                                                  const GridGeometry& geometry) {
  std::vector<GroundTruthNodule> out;
  for (const auto& a : annotations)
    if (auto c = geometry.cell_of(a)) out.push_back({a.scan_id, *c});
  return out;
}

Index MatchResult::true_positive_nodules() const {
  return static_cast<Index>(std::count_if(nodule_hits.begin(), nodule_hits.end(), [](const auto& h) { return h.has_value(); }));
}

Index MatchResult::false_positives() const {
  return static_cast<Index>(std::count(labels.begin(), labels.end(), MatchLabel::false_positive));
}

MatchResult match_candidates(std::vector<Candidate> candidates, std::span<const GroundTruthNodule> nodules,
                             bool allow_duplicates) {
  using Key = std::pair<std::string, std::array<Index, 3>>;
  std::map<Key, std::vector<std::size_t>> by_cell;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const auto& c = candidates[i];
    if (!std::isfinite(c.confidence)) throw ValidationError("candidate with non-finite confidence in scan " + c.scan_id);
    auto& slot = by_cell[{c.scan_id, c.cell}];
    if (!slot.empty() && !allow_duplicates) {
      throw ValidationError("duplicate candidate for scan " + c.scan_id + " cell " + cell_string(c.cell));
    }
    slot.push_back(i);
  }

  MatchResult r;
  r.labels.assign(candidates.size(), MatchLabel::false_positive);
  r.nodule_hits.resize(nodules.size());
  for (std::size_t n = 0; n < nodules.size(); ++n) {
    auto it = by_cell.find({nodules[n].scan_id, nodules[n].cell});
    if (it == by_cell.end()) continue;
    std::optional<std::size_t> best;
    for (std::size_t i : it->second) {
      r.labels[i] = r.labels[i] == MatchLabel::true_positive ? MatchLabel::true_positive : MatchLabel::ignored;
      if (!best) {
        best = i;
        continue;
      }
      const auto& c = candidates[i];
      const auto& b = candidates[*best];
      if (c.confidence > b.confidence || (c.confidence == b.confidence && cell_less(c.cell, b.cell))) best = i;
    }
    r.nodule_hits[n] = best;
    r.labels[*best] = MatchLabel::true_positive;
  }
  r.candidates = std::move(candidates);
  return r;
}

FrocCurve froc(const MatchResult& match, Index scan_count) {
  if (scan_count < 1) throw ValidationError("FROC needs at least one scan");
  if (match.nodule_hits.empty()) throw ValidationError("sensitivity is undefined without ground-truth nodules");
  FrocCurve curve;
  curve.scan_count = scan_count;
  curve.nodule_count = static_cast<Index>(match.nodule_hits.size());

  std::vector<double> fp, tp, thresholds;
  for (std::size_t i = 0; i < match.candidates.size(); ++i) {
    thresholds.push_back(match.candidates[i].confidence);
    if (match.labels[i] == MatchLabel::false_positive) fp.push_back(match.candidates[i].confidence);
  }
  for (const auto& h : match.nodule_hits)
    if (h) tp.push_back(match.candidates[*h].confidence);
  const auto desc = [](double a, double b) { return a > b; };
  std::sort(fp.begin(), fp.end(), desc);
  std::sort(tp.begin(), tp.end(), desc);
  std::sort(thresholds.begin(), thresholds.end(), desc);
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());

  const double scans = static_cast<double>(scan_count);
  const double nodules = static_cast<double>(curve.nodule_count);
  std::size_t nf = 0, nt = 0;
  for (double t : thresholds) {
    while (nf < fp.size() && fp[nf] >= t) ++nf;
    while (nt < tp.size() && tp[nt] >= t) ++nt;
    curve.points.push_back({static_cast<double>(nf) / scans, static_cast<double>(nt) / nodules});
  }
  const double strictest = curve.points.empty() ? 0.0 : curve.points.front().sensitivity;
  curve.points.insert(curve.points.begin(), FrocPoint{0.0, strictest});
  return curve;
}

double sensitivity_at(const FrocCurve& curve, double rate) {
  const auto& p = curve.points;
  if (p.empty() || rate < p.front().fp_per_scan) return 0.0;
  // Last point at or before the rate (highest sensitivity among equal FP).
  std::size_t lo = 0;
  while (lo + 1 < p.size() && p[lo + 1].fp_per_scan <= rate) ++lo;
  if (lo + 1 == p.size()) return p[lo].sensitivity;
  const auto& a = p[lo];
  const auto& b = p[lo + 1];
  const double t = (rate - a.fp_per_scan) / (b.fp_per_scan - a.fp_per_scan);
  return a.sensitivity + t * (b.sensitivity - a.sensitivity);
}

CpmResult cpm(const FrocCurve& curve) {
  CpmResult r;
  double sum = 0.0;
  for (std::size_t i = 0; i < kCpmRates.size(); ++i) {
    r.sensitivities[i] = sensitivity_at(curve, kCpmRates[i]);
    sum += r.sensitivities[i];
  }
  r.score = sum / static_cast<double>(kCpmRates.size());
  return r;
}

FrocReport evaluate(std::vector<Candidate> candidates, std::span<const GroundTruthNodule> nodules, Index scan_count) {
  const MatchResult m = match_candidates(std::move(candidates), nodules);
  FrocReport r;
  r.curve = froc(m, scan_count);
  r.cpm = cpm(r.curve);
  r.true_positives = m.true_positive_nodules();
  r.false_positives = m.false_positives();
  return r;
}

std::string format_report(const FrocReport& report) {
  std::ostringstream os;
  os << "scans " << report.curve.scan_count << ", nodules " << report.curve.nodule_count << ", detected "
     << report.true_positives << ", false positives " << report.false_positives << '\n';
  os << "  FP/scan  sensitivity\n";
  os << std::fixed;
  for (std::size_t i = 0; i < kCpmRates.size(); ++i) {
    os << std::setw(9) << std::setprecision(3) << kCpmRates[i] << "  " << std::setw(11) << std::setprecision(4)
       << report.cpm.sensitivities[i] << '\n';
  }
  os << "  CPM      " << std::setprecision(4) << report.cpm.score << '\n';
  return os.str();
}

std::string format_report_csv(const FrocReport& report) {
  std::ostringstream os;
  os << std::setprecision(17) << "rate,sensitivity\n";
  for (std::size_t i = 0; i < kCpmRates.size(); ++i) os << kCpmRates[i] << ',' << report.cpm.sensitivities[i] << '\n';
  os << "CPM," << report.cpm.score << '\n';
  return os.str();
}

std::vector<Candidate> read_candidates_csv(const std::filesystem::path& path) {
  std::vector<Candidate> out;
  read_csv(path, kCandidateHeader, [&](const std::vector<std::string>& f, std::size_t line) {
    Candidate c;
    c.scan_id = f[0];
    if (c.scan_id.empty()) throw ParseError("line " + std::to_string(line) + ": empty seriesuid");
    c.cell = {csv_integer(f[1], line, "cellX"), csv_integer(f[2], line, "cellY"), csv_integer(f[3], line, "cellZ")};
    for (Index v : c.cell)
      if (v < 0) throw ParseError("line " + std::to_string(line) + ": negative cell index");
    c.confidence = csv_double(f[4], line, "probability");
    out.push_back(c);
  });
  return out;
}

void write_candidates_csv(const std::filesystem::path& path, std::span<const Candidate> candidates) {
  std::ostringstream os;
  os << std::setprecision(17) << kCandidateHeader << '\n';
  for (const auto& c : candidates) {
    os << c.scan_id << ',' << c.cell[0] << ',' << c.cell[1] << ',' << c.cell[2] << ',' << c.confidence << '\n';
  }
  write_file_atomic(path, os.str());
}

}  // namespace s4nd
