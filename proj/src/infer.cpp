// SPDX-License-Identifier: Apache-2.0
#include "voxseg/infer.hpp"

#include <cmath>

#include <fmt/format.h>

#include "voxseg/augment.hpp"
#include "voxseg/error.hpp"

namespace voxseg {

namespace F = torch::nn::functional;

std::vector<int64_t> axis_anchors(int64_t length, int64_t patch) {
  if (length < 1 || patch < 1) throw ValidationError("patch grid needs positive volume and patch sizes");
  const int64_t n = (length + patch - 1) / patch;
  if (n == 1) return {0};
  std::vector<int64_t> anchors(n);
  for (int64_t i = 0; i < n; ++i)
    anchors[i] = static_cast<int64_t>(std::llround(static_cast<double>(i) * (length - patch) / (n - 1)));
  return anchors;
}

PatchGrid plan_patch_grid(const Shape3& shape, const Shape3& patch) {
  PatchGrid grid{shape, patch, {}};
  auto az = axis_anchors(shape[0], patch[0]);
  auto ay = axis_anchors(shape[1], patch[1]);
  auto ax = axis_anchors(shape[2], patch[2]);
  for (auto z : az)
    for (auto y : ay)
      for (auto x : ax) grid.starts.push_back({z, y, x});
  return grid;
}

Shape3 PatchGrid::window() const {
  return {std::min(patch_size[0], volume_shape[0]), std::min(patch_size[1], volume_shape[1]),
          std::min(patch_size[2], volume_shape[2])};
}

std::vector<std::vector<int64_t>> PatchGrid::axis_anchors() const {
  return {voxseg::axis_anchors(volume_shape[0], patch_size[0]), voxseg::axis_anchors(volume_shape[1], patch_size[1]),
          voxseg::axis_anchors(volume_shape[2], patch_size[2])};
}

MergeStrategy parse_merge_strategy(const std::string& name) {
  if (name == "later_wins") return MergeStrategy::LaterWins;
  if (name == "average") return MergeStrategy::Average;
  throw ValidationError(fmt::format("unknown merge strategy '{}' (expected later_wins or average)", name));
}

std::string merge_strategy_name(MergeStrategy s) { return s == MergeStrategy::LaterWins ? "later_wins" : "average"; }

torch::Tensor merge_patches(const PatchGrid& grid, const std::vector<torch::Tensor>& patch_outputs,
                            MergeStrategy strategy) {
  if (patch_outputs.size() != grid.starts.size())
    throw ValidationError(
        fmt::format("merge needs one output per patch: {} patches, {} outputs", grid.starts.size(), patch_outputs.size()));
  if (patch_outputs.empty()) throw ValidationError("merge of an empty patch grid");
  const auto win = grid.window();
  const auto [D, H, W] = grid.volume_shape;
  const int64_t channels = patch_outputs.front().size(0);
  auto out = torch::zeros({channels, D, H, W}, patch_outputs.front().options());
  torch::Tensor counts;
  if (strategy == MergeStrategy::Average) counts = torch::zeros({1, D, H, W}, out.options());

  for (size_t i = 0; i < grid.starts.size(); ++i) {
    const auto& s = grid.starts[i];
    const auto& p = patch_outputs[i];
    if (p.dim() != 4 || p.size(0) != channels || p.size(1) < win[0] || p.size(2) < win[1] || p.size(3) < win[2])
      throw ValidationError(fmt::format("patch output {} has the wrong shape", i));
    auto src = p.narrow(1, 0, win[0]).narrow(2, 0, win[1]).narrow(3, 0, win[2]);
    auto dst = out.narrow(1, s[0], win[0]).narrow(2, s[1], win[1]).narrow(3, s[2], win[2]);
    if (strategy == MergeStrategy::LaterWins) {
      dst.copy_(src);
    } else {
      dst.add_(src);
      counts.narrow(1, s[0], win[0]).narrow(2, s[1], win[1]).narrow(3, s[2], win[2]).add_(1);
    }
  }
  if (strategy == MergeStrategy::Average) {
    out.div_(counts);
    out.div_(out.sum(0, true));
  }
  return out;
}

TtaVariant parse_tta_variant(const std::string& name) {
  if (name == "none") return TtaVariant::None;
  if (name == "whd_flips") return TtaVariant::WhdFlips;
  if (name == "whd_flips_rot") return TtaVariant::WhdFlipsRot;
  if (name == "whd_flips_rot_gamma") return TtaVariant::WhdFlipsRotGamma;
  if (name == "all_flips_rot") return TtaVariant::AllFlipsRot;
  throw ValidationError(fmt::format("unknown TTA variant '{}'", name));
}

std::string tta_variant_name(TtaVariant v) {
  switch (v) {
    case TtaVariant::None: return "none";
    case TtaVariant::WhdFlips: return "whd_flips";
    case TtaVariant::WhdFlipsRot: return "whd_flips_rot";
    case TtaVariant::WhdFlipsRotGamma: return "whd_flips_rot_gamma";
    case TtaVariant::AllFlipsRot: return "all_flips_rot";
  }
  return "none";
}

torch::Tensor TtaMember::forward(const torch::Tensor& x) const {
  auto y = x;
  std::vector<int64_t> dims;
  for (int a = 0; a < 3; ++a)
    if (flips[a]) dims.push_back(a + 1);
  if (!dims.empty()) y = y.flip(dims);
  if (rot90 % 4 != 0) y = torch::rot90(y, rot90, {1, 2});
  return y.contiguous();
}

torch::Tensor TtaMember::inverse(const torch::Tensor& x) const {
  auto y = x;
  if (rot90 % 4 != 0) y = torch::rot90(y, -rot90, {1, 2});
  std::vector<int64_t> dims;
  for (int a = 0; a < 3; ++a)
    if (flips[a]) dims.push_back(a + 1);
  if (!dims.empty()) y = y.flip(dims);
  return y.contiguous();
}

std::vector<TtaMember> tta_members(TtaVariant variant) {
  std::vector<TtaMember> members;
  if (variant == TtaVariant::None) return {TtaMember{}};
  if (variant == TtaVariant::AllFlipsRot) {
    for (int mask = 0; mask < 8; ++mask) members.push_back({{(mask & 1) != 0, (mask & 2) != 0, (mask & 4) != 0}, 0, 1.0});
  } else {
    members.push_back({});
    members.push_back({{true, false, false}, 0, 1.0});
    members.push_back({{false, true, false}, 0, 1.0});
    members.push_back({{false, false, true}, 0, 1.0});
  }
  if (variant != TtaVariant::WhdFlips)
    for (int k = 1; k <= 3; ++k) members.push_back({{}, k, 1.0});
  if (variant == TtaVariant::WhdFlipsRotGamma) {
    members.push_back({{}, 0, 0.8});
    members.push_back({{}, 0, 1.2});
  }
  return members;
}

Segmenter as_segmenter(SegModel model) {
  model->eval();
  return [model](const torch::Tensor& x) mutable {
    torch::NoGradGuard guard;
    const auto dtype = model->parameters().front().scalar_type();
    return model->forward(x.to(dtype)).to(torch::kFloat32);
  };
}

torch::Tensor predict_tiled(const Segmenter& model, const torch::Tensor& image, const Shape3& patch,
                            MergeStrategy merge) {
  const Shape3 shape{image.size(1), image.size(2), image.size(3)};
  const auto grid = plan_patch_grid(shape, patch);
  const auto win = grid.window();
  std::vector<torch::Tensor> outputs;
  outputs.reserve(grid.starts.size());
  torch::NoGradGuard guard;
  for (const auto& s : grid.starts) {
    auto window = image.narrow(1, s[0], win[0]).narrow(2, s[1], win[1]).narrow(3, s[2], win[2]);
    // Axes shorter than the patch are zero-padded at the end; the padding is cropped by merge.
    const std::vector<int64_t> pad{0, patch[2] - win[2], 0, patch[1] - win[1], 0, patch[0] - win[0]};
    auto input = F::pad(window, F::PadFuncOptions(pad)).unsqueeze(0);
    auto logits = model(input);
    if (logits.dim() != 5 || logits.size(1) != kNumClasses || logits.size(2) != patch[0] ||
        logits.size(3) != patch[1] || logits.size(4) != patch[2])
      throw ShapeError("segmenter output shape does not match its input patch");
    outputs.push_back(torch::softmax(logits.squeeze(0).to(torch::kFloat32), 0));
  }
  return merge_patches(grid, outputs, merge);
}

ProbabilityVolume tta_predict(const Segmenter& model, const MultiModalVolume& vol, TtaVariant variant,
                              const Shape3& patch, MergeStrategy merge) {
  const auto members = tta_members(variant);
  torch::Tensor sum;
  for (const auto& m : members) {
    auto input = m.forward(vol.data());
    if (m.gamma != 1.0) input = apply_gamma(vol.with_data(input), m.gamma).data();
    auto probs = m.inverse(predict_tiled(model, input, patch, merge));
    sum = sum.defined() ? sum.add_(probs) : probs;
  }
  sum.div_(static_cast<double>(members.size()));
  sum.div_(sum.sum(0, true));
  return ProbabilityVolume(sum.clamp_(0.0, 1.0), vol.spacing());
}

ProbabilityVolume predict_volume(const Segmenter& model, const MultiModalVolume& vol, const PredictOptions& options) {
  if (options.tta != TtaVariant::None) return tta_predict(model, vol, options.tta, options.patch_size, options.merge);
  auto probs = predict_tiled(model, vol.data(), options.patch_size, options.merge);
  return ProbabilityVolume(probs, vol.spacing());
}

}  // namespace voxseg
