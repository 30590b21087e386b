// SPDX-License-Identifier: Apache-2.0
#include "voxseg/losses.hpp"

#include <cmath>

#include <fmt/format.h>

#include "voxseg/error.hpp"
#include "voxseg/volume.hpp"

namespace voxseg {

namespace {

void check_target(const torch::Tensor& scores, const torch::Tensor& target) {
  if (scores.dim() != 5 || scores.size(1) != kNumClasses)
    throw ShapeError(fmt::format("expected [N, 4, D, H, W] scores, got rank {}", scores.dim()));
  if (target.dim() != 4 || target.size(0) != scores.size(0) || target.size(1) != scores.size(2) ||
      target.size(2) != scores.size(3) || target.size(3) != scores.size(4))
    throw ShapeError("target shape does not match scores");
  if (target.numel() > 0 && (target.min().item<int64_t>() < 0 || target.max().item<int64_t>() >= kNumClasses))
    throw ValidationError("target holds a class index outside {0,1,2,3}");
}

}  // namespace

void validate_loss_weights(double w_dice, double w_ce) {
  if (!(w_dice >= 0 && w_ce >= 0) || std::abs(w_dice + w_ce - 1.0) > 1e-9)
    throw ValidationError(fmt::format("loss weights must be nonnegative and sum to 1, got ({}, {})", w_dice, w_ce));
}

torch::Tensor soft_dice_per_class(const torch::Tensor& probs, const torch::Tensor& target, double eps) {
  check_target(probs, target);
  auto onehot = torch::one_hot(target, kNumClasses).permute({0, 4, 1, 2, 3}).to(probs.dtype());
  auto p = probs.narrow(1, 1, kNumClasses - 1);
  auto t = onehot.narrow(1, 1, kNumClasses - 1);
  const std::vector<int64_t> reduce{0, 2, 3, 4};
  auto inter = (p * t).sum(reduce);
  return (2 * inter + eps) / (p.sum(reduce) + t.sum(reduce) + eps);
}

torch::Tensor soft_dice_loss(const torch::Tensor& probs, const torch::Tensor& target, double eps) {
  return 1 - soft_dice_per_class(probs, target, eps).mean();
}

torch::Tensor cross_entropy_loss(const torch::Tensor& logits, const torch::Tensor& target) {
  check_target(logits, target);
  auto logp = torch::log_softmax(logits, 1);
  return -logp.gather(1, target.unsqueeze(1)).mean();
}

LossTerms combined_loss(const torch::Tensor& logits, const torch::Tensor& target, double w_dice, double w_ce) {
  validate_loss_weights(w_dice, w_ce);
  auto dice = soft_dice_loss(torch::softmax(logits, 1), target);
  auto ce = voxseg::cross_entropy_loss(logits, target);
  return {w_dice * dice + w_ce * ce, dice, ce};
}

torch::Tensor reconstruction_loss(const torch::Tensor& recon, const torch::Tensor& input) {
  if (recon.sizes() != input.sizes()) throw ShapeError("reconstruction and input shapes differ");
  return (recon - input).abs().mean();
}

}  // namespace voxseg
