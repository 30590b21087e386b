// SPDX-License-Identifier: Apache-2.0
//
// Preprocessing and augmentation for both training regimes:
//
//  * transbts: whole-volume z-score, random crop, random flips on every axis,
//    per-channel random intensity scale/shift.
//  * nnunet:   z-score over the nonzero mask, nonzero bounding-box crop, then
//    elastic / scale / rotation / gamma / mirroring, each with probability p.
//
// Every random transform is split into a draw (consumes the rng, returns
// plain parameters) and an apply (pure). Tests force outcomes through the
// apply half.
#pragma once

#include <array>
#include <random>
#include <utility>

#include "voxseg/volume.hpp"

namespace voxseg {

using Rng = std::mt19937_64;

enum class Regime { TransBTS, NnUNet };

struct AugmentConfig {
  Regime regime = Regime::TransBTS;
  double intensity_factor = 0.1;
  Shape3 crop_size{128, 128, 128};
  std::pair<double, double> scale_range{0.85, 1.25};
  std::pair<double, double> gamma_range{0.7, 1.5};
  bool elastic_enabled = true;
  double apply_probability = 0.5;
  double rotation_max_degrees = 30.0;
  double elastic_sigma = 6.0;
  double elastic_alpha_max = 8.0;
  uint64_t seed = 0;

  /// Throws ValidationError naming the offending field.
  void validate() const;
};

enum class NormalizeMode { Whole, Nonzero };

/// Per-channel standardization over the whole volume or over voxels where
/// any channel is nonzero (voxels outside that support stay zero).
MultiModalVolume zscore_normalize(const MultiModalVolume& vol, NormalizeMode mode);

struct CropResult {
  MultiModalVolume image;
  LabelVolume labels;
  /// Input coordinate of output voxel (0,0,0); negative along padded axes.
  Shape3 origin;
};

/// Zero-pads symmetrically where an axis is shorter than `size`, then crops a
/// uniformly placed window. Image and labels share the window.
CropResult crop_at(const MultiModalVolume& vol, const LabelVolume& labels, const Shape3& size, const Shape3& start);
CropResult random_crop(const MultiModalVolume& vol, const LabelVolume& labels, const Shape3& size, Rng& rng);

using FlipAxes = std::array<bool, 3>;

FlipAxes draw_flips(Rng& rng, double p = 0.5);
std::pair<MultiModalVolume, LabelVolume> apply_flips(const MultiModalVolume& vol, const LabelVolume& labels,
                                                     const FlipAxes& axes);
std::pair<MultiModalVolume, LabelVolume> random_flip(const MultiModalVolume& vol, const LabelVolume& labels, Rng& rng);

struct IntensityShift {
  std::array<float, kNumModalities> scale{1, 1, 1, 1};
  std::array<float, kNumModalities> shift{0, 0, 0, 0};
};

/// scale ~ U(1-f, 1+f), shift ~ U(-f, f), one pair per channel.
IntensityShift draw_intensity_shift(double factor, Rng& rng);
MultiModalVolume apply_intensity_shift(const MultiModalVolume& vol, const IntensityShift& params);
MultiModalVolume random_intensity_shift(const MultiModalVolume& vol, double factor, Rng& rng);

/// Half-open voxel bounding box [lo, hi) per axis.
struct BoundingBox {
  Shape3 lo{};
  Shape3 hi{};
  bool operator==(const BoundingBox&) const = default;
};

struct NonzeroCrop {
  MultiModalVolume image;
  LabelVolume labels;
  BoundingBox bbox;
};

/// Crops to the tight box around voxels where any channel is nonzero.
NonzeroCrop nonzero_crop(const MultiModalVolume& vol, const LabelVolume& labels);

struct NnUNetPlan {
  bool elastic = false;
  double elastic_alpha = 0.0;
  uint64_t elastic_seed = 0;
  bool scale = false;
  double scale_factor = 1.0;
  bool rotate = false;
  std::array<double, 3> angles_rad{};
  bool gamma = false;
  double gamma_value = 1.0;
  bool mirror = false;
  FlipAxes mirror_axes{};
};

NnUNetPlan draw_nnunet_plan(const AugmentConfig& cfg, Rng& rng);
/// Elastic, scaling and rotation are composed into one resampling pass
/// (trilinear for images, nearest for labels), then gamma, then mirroring.
std::pair<MultiModalVolume, LabelVolume> apply_nnunet_plan(const MultiModalVolume& vol, const LabelVolume& labels,
                                                           const NnUNetPlan& plan, const AugmentConfig& cfg);
std::pair<MultiModalVolume, LabelVolume> nnunet_augment(const MultiModalVolume& vol, const LabelVolume& labels,
                                                        const AugmentConfig& cfg, Rng& rng);

/// Per-channel gamma after shifting each channel to [0, range]. gamma == 1 is the identity.
MultiModalVolume apply_gamma(const MultiModalVolume& vol, double gamma);

/// One-shot preprocessing of a raw case for the configured regime
/// (z-score, plus nonzero crop for nnunet).
std::pair<MultiModalVolume, LabelVolume> preprocess_case(const MultiModalVolume& vol, const LabelVolume& labels,
                                                         Regime regime);

/// Per-step augmentation of a preprocessed case; output spatial shape is cfg.crop_size.
std::pair<MultiModalVolume, LabelVolume> augment_sample(const MultiModalVolume& vol, const LabelVolume& labels,
                                                        const AugmentConfig& cfg, Rng& rng);

}  // namespace voxseg
