// SPDX-License-Identifier: Apache-2.0
//
// Overlap and surface-distance metrics for binary masks, and per-case /
// per-set reports.
//
// Empty-mask conventions: both empty -> dice 1, hd95 0; exactly one empty ->
// dice 0, hd95 kHd95EmptyPenalty.
#pragma once

#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "voxseg/volume.hpp"

namespace voxseg {

inline constexpr double kHd95EmptyPenalty = 373.1287;

double dice(const torch::Tensor& a, const torch::Tensor& b);

/// Foreground voxels with at least one of their 6 neighbours outside the mask
/// (voxels on the volume border count as boundary).
torch::Tensor surface_voxels(const torch::Tensor& mask);

/// Euclidean distance (mm) from every voxel to the nearest true voxel of
/// `mask`; +inf everywhere if the mask is empty. float64 [D, H, W].
torch::Tensor distance_to(const torch::Tensor& mask, const Spacing& spacing);

/// Linear-interpolation percentile, q in [0, 100].
double percentile(std::vector<double> values, double q);

/// 95th percentile of the pooled directed surface distances.
double hd95(const torch::Tensor& a, const torch::Tensor& b, const Spacing& spacing = {});

struct SensSpec {
  double sensitivity = 0;
  double specificity = 0;
};

SensSpec sensitivity_specificity(const torch::Tensor& pred, const torch::Tensor& gt);

struct RegionMetrics {
  double dice = 0;
  double hd95 = 0;
  double sensitivity = 0;
  double specificity = 0;
};

void to_json(nlohmann::json& j, const RegionMetrics& m);

/// Regions: ET / TC / WT (default). Labels: NCR / ED / ET.
enum class EvalMode { Regions, Labels };
EvalMode parse_eval_mode(const std::string& name);

struct MetricsReport {
  std::string case_id;
  EvalMode mode = EvalMode::Regions;
  /// (name, metrics) in column order: et, tc, wt or ncr, ed, et.
  std::vector<std::pair<std::string, RegionMetrics>> regions;

  const RegionMetrics& at(const std::string& name) const;
};

void to_json(nlohmann::json& j, const MetricsReport& r);

MetricsReport evaluate_case(const LabelVolume& pred, const LabelVolume& gt, const std::string& case_id = {},
                            EvalMode mode = EvalMode::Regions);

struct SetReport {
  std::vector<MetricsReport> cases;
  MetricsReport mean;

  nlohmann::json to_json() const;
  /// Aligned text table, one row per case plus the mean.
  std::string to_table() const;
};

struct EvalPair {
  std::string case_id;
  LabelVolume pred;
  LabelVolume gt;
};

SetReport evaluate_set(const std::vector<EvalPair>& pairs, EvalMode mode = EvalMode::Regions);
SetReport aggregate(std::vector<MetricsReport> cases);

}  // namespace voxseg
