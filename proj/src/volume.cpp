// SPDX-License-Identifier: Apache-2.0
#include "voxseg/volume.hpp"

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "voxseg/error.hpp"

namespace voxseg {

namespace {

Shape3 spatial_shape(const torch::Tensor& t, int64_t first) {
  return {t.size(first), t.size(first + 1), t.size(first + 2)};
}

void check_spacing(const Spacing& s) {
  if (!(s.d > 0 && s.h > 0 && s.w > 0))
    throw ValidationError(fmt::format("spacing must be positive, got ({}, {}, {})", s.d, s.h, s.w));
}

}  // namespace

bool is_valid_label(int value) { return value == 0 || value == 1 || value == 2 || value == 4; }

int64_t label_to_channel(int value) {
  switch (value) {
    case 0: return 0;
    case 1: return 1;
    case 2: return 2;
    case 4: return 3;
    default: throw ValidationError(fmt::format("illegal label {}", value));
  }
}

uint8_t channel_to_label(int64_t channel) {
  static constexpr uint8_t kMap[] = {0, 1, 2, 4};
  if (channel < 0 || channel >= kNumClasses)
    throw ValidationError(fmt::format("illegal class channel {}", channel));
  return kMap[channel];
}

std::string shape_string(const Shape3& s) { return fmt::format("({}, {}, {})", s[0], s[1], s[2]); }

void validate_label_values(const torch::Tensor& data) {
  auto flat = data.to(torch::kInt16).flatten();
  auto bad = (flat != 0) & (flat != 1) & (flat != 2) & (flat != 4);
  if (bad.any().item<bool>()) {
    auto idx = bad.nonzero()[0].item<int64_t>();
    throw ValidationError(fmt::format("illegal label {}", flat[idx].item<int>()));
  }
}

MultiModalVolume::MultiModalVolume(torch::Tensor data, Spacing spacing, std::string case_id)
    : spacing_(spacing), case_id_(std::move(case_id)) {
  if (data.dim() != 4)
    throw ValidationError(fmt::format("image volume must be rank 4 (C,D,H,W), got rank {}", data.dim()));
  if (data.size(0) != kNumModalities)
    throw ValidationError(fmt::format("image volume needs 4 channels, got {}", data.size(0)));
  check_spacing(spacing);
  data_ = data.to(torch::kFloat32).contiguous();
  if (!torch::isfinite(data_).all().item<bool>()) throw ValidationError("image volume holds non-finite values");
}

Shape3 MultiModalVolume::shape() const { return spatial_shape(data_, 1); }

LabelVolume::LabelVolume(torch::Tensor data, Spacing spacing) : spacing_(spacing) {
  if (data.dim() != 3)
    throw ValidationError(fmt::format("label volume must be rank 3 (D,H,W), got rank {}", data.dim()));
  check_spacing(spacing);
  validate_label_values(data);
  data_ = data.to(torch::kUInt8).contiguous();
}

Shape3 LabelVolume::shape() const { return spatial_shape(data_, 0); }

torch::Tensor LabelVolume::channel_indices() const {
  auto out = data_.to(torch::kInt64);
  out.masked_fill_(out == 4, 3);
  return out;
}

int64_t LabelVolume::count(Label label) const {
  return (data_ == static_cast<int>(label)).sum().item<int64_t>();
}

ProbabilityVolume::ProbabilityVolume(torch::Tensor data, Spacing spacing) : spacing_(spacing) {
  if (data.dim() != 4 || data.size(0) != kNumClasses)
    throw ValidationError(fmt::format("probability volume must be [4,D,H,W], got {}", fmt::join(data.sizes(), "x")));
  check_spacing(spacing);
  data_ = data.to(torch::kFloat32).contiguous();
  if (!torch::isfinite(data_).all().item<bool>()) throw ValidationError("probability volume holds non-finite values");
  if ((data_ < 0).any().item<bool>() || (data_ > 1).any().item<bool>())
    throw ValidationError("probabilities must lie in [0, 1]");
  auto drift = (data_.sum(0) - 1.0f).abs().max().item<float>();
  if (drift > 1e-4f) throw ValidationError(fmt::format("channel sums deviate from 1 by {}", drift));
}

Shape3 ProbabilityVolume::shape() const { return spatial_shape(data_, 1); }

RegionMasks region_decompose(const LabelVolume& labels) {
  const auto& l = labels.data();
  auto et = l == 4;
  auto tc = et | (l == 1);
  auto wt = tc | (l == 2);
  return {et, tc, wt};
}

}  // namespace voxseg
