#pragma once

#include "vsg/volio.hpp"

#include <json.hpp>

#include <array>
#include <span>
#include <string>
#include <vector>

namespace vsg {

// Hausdorff value reported when exactly one of the two masks is empty.
inline constexpr double kMissedRegionHd = 373.13;
inline constexpr double kDefaultHdPercentile = 95.0;

// 2|A n B| / (|A| + |B|); 1 when both are empty.
double dice(const Mask& a, const Mask& b);

// Mask voxels with at least one 6-neighbour outside the mask (grid edges count as outside).
Mask boundary(const Mask& m);

// Exact Euclidean distance (mm) from every voxel to the nearest set voxel of
// `features`; +inf everywhere when `features` is empty.
std::vector<double> distance_transform(const Mask& features, const Spacing3& spacing);

// Linear interpolation between order statistics at rank p/100 (n - 1).
double percentile_of(std::vector<double> values, double p);

// Symmetric percentile Hausdorff distance between the boundaries of a and b:
// max of the two directed percentile distances.
double hausdorff(const Mask& a, const Mask& b, const Spacing3& spacing, double percentile = kDefaultHdPercentile);

struct RegionScore {
  RegionName region = RegionName::ET;
  double dice = 0.0;
  double hd = 0.0;
};

struct SubjectReport {
  std::string subject_id;
  std::array<RegionScore, 3> scores;  // ET, TC, WT
  double mean_dice = 0.0;
  double mean_hd = 0.0;
  double hd_percentile = kDefaultHdPercentile;
};

SubjectReport evaluate_subject(const LabelMap& pred, const LabelMap& gt, const Spacing3& spacing,
                               double percentile = kDefaultHdPercentile, std::string subject_id = {});

// Per-region means over subjects, in the same layout as a SubjectReport.
SubjectReport aggregate_reports(std::span<const SubjectReport> reports);

void to_json(nlohmann::json& j, const RegionScore& s);
void to_json(nlohmann::json& j, const SubjectReport& r);

}  // namespace vsg
