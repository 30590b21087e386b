// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <torch/torch.h>

namespace voxseg {

inline constexpr double kDiceSmooth = 1e-5;

/// 1 - mean over the foreground classes (NCR, ED, ET) of
/// (2 sum(p t) + eps) / (sum p + sum t + eps); sums run over batch and space.
/// probs: [N, 4, D, H, W] softmax output; target: [N, D, H, W] channel indices.
torch::Tensor soft_dice_loss(const torch::Tensor& probs, const torch::Tensor& target, double eps = kDiceSmooth);

/// Per-class soft dice terms [3] for NCR, ED, ET (same sums as soft_dice_loss).
torch::Tensor soft_dice_per_class(const torch::Tensor& probs, const torch::Tensor& target, double eps = kDiceSmooth);

/// Mean voxelwise -log softmax(logits)[true class].
torch::Tensor cross_entropy_loss(const torch::Tensor& logits, const torch::Tensor& target);

struct LossTerms {
  torch::Tensor total;
  torch::Tensor dice;
  torch::Tensor ce;
};

/// w_dice * soft_dice_loss(softmax(logits)) + w_ce * cross_entropy_loss(logits).
/// Weights must be nonnegative and sum to 1.
LossTerms combined_loss(const torch::Tensor& logits, const torch::Tensor& target, double w_dice, double w_ce);

/// Mean absolute error over every voxel and channel.
torch::Tensor reconstruction_loss(const torch::Tensor& recon, const torch::Tensor& input);

/// Throws ValidationError unless w_dice, w_ce >= 0 and w_dice + w_ce = 1.
void validate_loss_weights(double w_dice, double w_ce);

}  // namespace voxseg
