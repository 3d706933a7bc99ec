#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "s4nd/loss_grid.hpp"

namespace s4nd {

/// One scored grid cell; cell is (x, y, z).
struct Candidate {
  std::string scan_id;
  std::array<Index, 3> cell{};
  double confidence = 0.0;
};

/// One ground-truth nodule reduced to the grid cell holding its centre.
struct GroundTruthNodule {
  std::string scan_id;
  std::array<Index, 3> cell{};
};

/// Every cell of a (1, 1, z, y, x) probability grid with value >= floor.
std::vector<Candidate> extract_candidates(const Tensor<double>& grid, const std::string& scan_id,
                                          double floor = 1e-4);

/// Cells of the annotations that fall inside the geometry.
std::vector<GroundTruthNodule> ground_truth_cells(std::span<const VoxelAnnotation> annotations,
                                                  const GridGeometry& geometry);

enum class MatchLabel { true_positive, ignored, false_positive };

struct MatchResult {
  std::vector<Candidate> candidates;
  /// Parallel to candidates.
  std::vector<MatchLabel> labels;
  /// Per nodule, the index of its true-positive candidate.
  std::vector<std::optional<std::size_t>> nodule_hits;

  Index true_positive_nodules() const;
  Index false_positives() const;
};

/// A candidate hits a nodule when it sits on the nodule's cell. Each nodule's
/// true positive is its highest-confidence hit (ties: lower cell, then earlier
/// candidate); other hits are ignored; candidates hitting nothing are false
/// positives. Two candidates on one (scan, cell) are a ValidationError unless
/// allow_duplicates is set.
MatchResult match_candidates(std::vector<Candidate> candidates, std::span<const GroundTruthNodule> nodules,
                             bool allow_duplicates = false);

struct FrocPoint {
  double fp_per_scan = 0.0;
  double sensitivity = 0.0;

  friend bool operator==(const FrocPoint&, const FrocPoint&) = default;
};

struct FrocCurve {
  std::vector<FrocPoint> points;
  Index scan_count = 0;
  Index nodule_count = 0;
};

/// Threshold sweep over every distinct candidate confidence, descending,
/// preceded by (0, sensitivity at the strictest threshold).
FrocCurve froc(const MatchResult& match, Index scan_count);

inline constexpr std::array<double, 7> kCpmRates{0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0};

struct CpmResult {
  std::array<double, 7> sensitivities{};
  double score = 0.0;
};

/// Sensitivity at each rate by linear interpolation in FP/scan (0 before the
/// first point, constant after the last); score is their mean.
CpmResult cpm(const FrocCurve& curve);
/// Curve value at one FP/scan rate under the same rule.
double sensitivity_at(const FrocCurve& curve, double fp_per_scan);

struct FrocReport {
  FrocCurve curve;
  CpmResult cpm;
  Index true_positives = 0;
  Index false_positives = 0;
};

FrocReport evaluate(std::vector<Candidate> candidates, std::span<const GroundTruthNodule> nodules, Index scan_count);

/// Human-readable table of the seven rates and the score.
std::string format_report(const FrocReport& report);
/// "rate,sensitivity" rows followed by "CPM,<score>".
std::string format_report_csv(const FrocReport& report);

inline constexpr const char* kCandidateHeader = "seriesuid,cellX,cellY,cellZ,probability";

std::vector<Candidate> read_candidates_csv(const std::filesystem::path& path);
void write_candidates_csv(const std::filesystem::path& path, std::span<const Candidate> candidates);

}  // namespace s4nd
