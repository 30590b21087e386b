// SPDX-License-Identifier: Apache-2.0
//
// Whole-volume prediction from fixed-size patches.
//
// Per axis of length L and patch P: n = ceil(L / P) anchors; one anchor at 0
// when n == 1 (zero-padded if L < P), otherwise start_i = round(i (L - P) / (n - 1)).
// The grid is the Cartesian product of axis anchors in row-major order, which
// is also the merge order: with later_wins, a voxel takes the prediction of
// the last patch covering it.
#pragma once

#include <functional>
#include <string>
#include <vector>

#include "voxseg/model.hpp"
#include "voxseg/volume.hpp"

namespace voxseg {

struct PatchGrid {
  Shape3 volume_shape{};
  Shape3 patch_size{};
  std::vector<Shape3> starts;

  /// Extent of patch windows that lies inside the volume: min(P, L) per axis.
  Shape3 window() const;
  std::vector<std::vector<int64_t>> axis_anchors() const;
};

/// Anchors along one axis.
std::vector<int64_t> axis_anchors(int64_t length, int64_t patch);
PatchGrid plan_patch_grid(const Shape3& shape, const Shape3& patch);

enum class MergeStrategy { LaterWins, Average };
MergeStrategy parse_merge_strategy(const std::string& name);
std::string merge_strategy_name(MergeStrategy s);

/// patch_outputs[i]: [C, P, P, P] for grid.starts[i]; returns [C, D, H, W].
/// `average` renormalizes channels to sum 1.
torch::Tensor merge_patches(const PatchGrid& grid, const std::vector<torch::Tensor>& patch_outputs,
                            MergeStrategy strategy);

enum class TtaVariant { None, WhdFlips, WhdFlipsRot, WhdFlipsRotGamma, AllFlipsRot };
TtaVariant parse_tta_variant(const std::string& name);
std::string tta_variant_name(TtaVariant v);

/// One test-time transform. Flips apply first, then k x 90 degree rotation in
/// the axial (D, H) plane; gamma only touches intensities.
struct TtaMember {
  std::array<bool, 3> flips{};
  int rot90 = 0;
  double gamma = 1.0;

  /// Image or probability map [C, D, H, W].
  torch::Tensor forward(const torch::Tensor& x) const;
  /// Undoes the spatial part of forward() on a [C, D, H, W] map.
  torch::Tensor inverse(const torch::Tensor& x) const;
};

/// Members in a fixed order. whd_flips: identity + one flip per axis;
/// +rot: 90/180/270 degree axial rotations; +gamma: 0.8 and 1.2;
/// all_flips_rot: all 8 flip combinations + the three rotations.
std::vector<TtaMember> tta_members(TtaVariant variant);

/// Maps a [N, 4, d, h, w] batch to [N, 4, d, h, w] class logits.
using Segmenter = std::function<torch::Tensor(const torch::Tensor&)>;

/// Frozen model (eval mode, no grad) as a Segmenter.
Segmenter as_segmenter(SegModel model);

struct PredictOptions {
  Shape3 patch_size{128, 128, 128};
  MergeStrategy merge = MergeStrategy::LaterWins;
  TtaVariant tta = TtaVariant::None;
};

/// Tiled prediction of one [4, D, H, W] image to probabilities [4, D, H, W], no TTA.
torch::Tensor predict_tiled(const Segmenter& model, const torch::Tensor& image, const Shape3& patch,
                            MergeStrategy merge);

/// Averages predict_tiled over the TTA members, each mapped back by its inverse.
ProbabilityVolume tta_predict(const Segmenter& model, const MultiModalVolume& vol, TtaVariant variant,
                              const Shape3& patch = {128, 128, 128}, MergeStrategy merge = MergeStrategy::LaterWins);

ProbabilityVolume predict_volume(const Segmenter& model, const MultiModalVolume& vol, const PredictOptions& options = {});

}  // namespace voxseg
