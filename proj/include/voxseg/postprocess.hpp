// SPDX-License-Identifier: Apache-2.0
//
// Ensemble fusion, label extraction and label-map cleanup.
#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "voxseg/volume.hpp"

namespace voxseg {

/// Per-class weights over M member models. Background gets 1/M per member.
struct EnsembleWeights {
  std::vector<double> ncr, ed, et;

  size_t members() const { return ncr.size(); }
  /// Each vector has length m, entries >= 0, sum 1 within 1e-6.
  void validate(size_t m) const;

  static EnsembleWeights uniform(size_t m);
  /// Two-model weights: NCR 0.5/0.5, ED 0.7/0.3, ET 0.6/0.4.
  static EnsembleWeights two_model();
  /// Three-model weights of the final solution.
  static EnsembleWeights three_model();
};

void to_json(nlohmann::json& j, const EnsembleWeights& w);
void from_json(const nlohmann::json& j, EnsembleWeights& w);

/// Weighted per-class sum of the members, renormalized to sum 1 per voxel.
ProbabilityVolume ensemble_average(const std::vector<ProbabilityVolume>& members, const EnsembleWeights& w);
/// Same, before renormalization.
torch::Tensor ensemble_scores(const std::vector<ProbabilityVolume>& members, const EnsembleWeights& w);

/// Labels of the fused scores. Scores are rounded to float32 before the
/// argmax, so a member fused with itself keeps its labels exactly, ties included.
LabelVolume ensemble_labels(const std::vector<ProbabilityVolume>& members, const EnsembleWeights& w);

/// Channel argmax mapped to labels {0,1,2,4}; ties go to the lower channel.
LabelVolume argmax_labels(const ProbabilityVolume& probs);
LabelVolume argmax_labels(const torch::Tensor& scores, const Spacing& spacing);

enum class Connectivity { Six = 6, TwentySix = 26 };
Connectivity parse_connectivity(int n);

struct ComponentLabeling {
  /// int32 [D, H, W]; 0 = background, components numbered 1..K in scan order.
  torch::Tensor labels;
  /// sizes[k - 1] = voxel count of component k.
  std::vector<int64_t> sizes;
  Connectivity connectivity = Connectivity::TwentySix;

  int64_t count() const { return static_cast<int64_t>(sizes.size()); }
};

ComponentLabeling connected_components(const torch::Tensor& mask, Connectivity connectivity);

enum class CcaScope { WholeForeground, PerClass };
CcaScope parse_cca_scope(const std::string& name);
std::string cca_scope_name(CcaScope s);

/// Zeroes components with fewer than min_size voxels.
LabelVolume remove_small_components(const LabelVolume& labels, int64_t min_size = 15,
                                    Connectivity connectivity = Connectivity::TwentySix,
                                    CcaScope scope = CcaScope::WholeForeground);

/// Relabels every ET voxel as NCR when 0 < count(ET) <= threshold.
LabelVolume et_replacement(const LabelVolume& labels, int64_t threshold = 300);

struct PostprocessConfig {
  bool cca_enabled = false;
  int64_t cca_min_size = 15;
  Connectivity cca_connectivity = Connectivity::TwentySix;
  CcaScope cca_scope = CcaScope::WholeForeground;
  bool et_replacement_enabled = true;
  int64_t et_threshold = 300;

  void validate() const;
};

void to_json(nlohmann::json& j, const PostprocessConfig& c);
void from_json(const nlohmann::json& j, PostprocessConfig& c);

/// Component filtering (when enabled) followed by ET replacement.
LabelVolume postprocess(const LabelVolume& labels, const PostprocessConfig& cfg);

}  // namespace voxseg
