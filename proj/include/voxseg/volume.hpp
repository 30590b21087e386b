// SPDX-License-Identifier: Apache-2.0
//
// Voxel containers shared by every stage. Layout is channel-first (C, D, H, W),
// row-major, W fastest. Containers validate on construction and are immutable
// afterwards.
#pragma once

#include <array>
#include <cstdint>
#include <string>

#include <torch/torch.h>

namespace voxseg {

using Shape3 = std::array<int64_t, 3>;

/// Millimetres per voxel along (D, H, W).
struct Spacing {
  float d = 1.0f;
  float h = 1.0f;
  float w = 1.0f;

  bool operator==(const Spacing&) const = default;
  float operator[](int axis) const { return axis == 0 ? d : axis == 1 ? h : w; }
};

inline constexpr int64_t kNumModalities = 4;
inline constexpr int64_t kNumClasses = 4;  // background, NCR, ED, ET

/// Label values as stored on disk.
enum class Label : uint8_t { Background = 0, Necrosis = 1, Edema = 2, Enhancing = 4 };

/// {0,1,2,4} -> {0,1,2,3}. Throws ValidationError on any other value.
int64_t label_to_channel(int value);
/// {0,1,2,3} -> {0,1,2,4}.
uint8_t channel_to_label(int64_t channel);
bool is_valid_label(int value);

std::string shape_string(const Shape3& s);

/// Four-channel MRI volume (FLAIR, T1, T1ce, T2), float32 [4, D, H, W].
class MultiModalVolume {
 public:
  MultiModalVolume(torch::Tensor data, Spacing spacing = {}, std::string case_id = {});

  const torch::Tensor& data() const { return data_; }
  const Spacing& spacing() const { return spacing_; }
  const std::string& case_id() const { return case_id_; }
  Shape3 shape() const;

  MultiModalVolume with_data(torch::Tensor data) const { return {std::move(data), spacing_, case_id_}; }

 private:
  torch::Tensor data_;
  Spacing spacing_;
  std::string case_id_;
};

/// Segmentation labels, uint8 [D, H, W], values in {0, 1, 2, 4}.
class LabelVolume {
 public:
  LabelVolume(torch::Tensor data, Spacing spacing = {});

  const torch::Tensor& data() const { return data_; }
  const Spacing& spacing() const { return spacing_; }
  Shape3 shape() const;

  /// Channel indices {0..3} as int64, suitable for loss targets.
  torch::Tensor channel_indices() const;
  int64_t count(Label label) const;

  LabelVolume with_data(torch::Tensor data) const { return {std::move(data), spacing_}; }

 private:
  torch::Tensor data_;
  Spacing spacing_;
};

/// Per-class probabilities, float32 [4, D, H, W], channel order
/// (background, NCR, ED, ET). Entries in [0,1]; channel sums 1 +- 1e-4.
class ProbabilityVolume {
 public:
  ProbabilityVolume(torch::Tensor data, Spacing spacing = {});

  const torch::Tensor& data() const { return data_; }
  const Spacing& spacing() const { return spacing_; }
  Shape3 shape() const;

 private:
  torch::Tensor data_;
  Spacing spacing_;
};

/// Evaluated tumour regions as bool [D, H, W] masks; et <= tc <= wt voxelwise.
struct RegionMasks {
  torch::Tensor et;
  torch::Tensor tc;
  torch::Tensor wt;
};

/// et = label 4; tc = labels {1,4}; wt = labels {1,2,4}.
RegionMasks region_decompose(const LabelVolume& labels);

/// Throws ValidationError unless `data` only holds {0,1,2,4}.
void validate_label_values(const torch::Tensor& data);

}  // namespace voxseg
