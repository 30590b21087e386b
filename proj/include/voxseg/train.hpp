// SPDX-License-Identifier: Apache-2.0
//
// Training engine: self-supervised reconstruction pretraining of the encoder
// and segmentation training with the Dice + cross-entropy objective.
#pragma once

#include <filesystem>
#include <optional>
#include <ostream>
#include <span>
#include <vector>

#include <json.hpp>

#include "voxseg/augment.hpp"
#include "voxseg/checkpoint.hpp"
#include "voxseg/model.hpp"

namespace voxseg {

struct TrainConfig {
  int64_t epochs = 10;
  int64_t batch_size = 1;
  double lr = 2e-4;
  double weight_decay = 1e-5;
  double w_dice = 0.4;
  double w_ce = 0.6;
  double poly_power = 0.9;
  bool mixed_precision = false;
  /// Run model and data in float64 (gradient checks, bitwise resume checks).
  bool float64 = false;
  uint64_t seed = 0;
  Regime regime = Regime::TransBTS;
  /// Stop after this many optimizer steps in total; 0 = no cap.
  int64_t max_steps = 0;

  void validate() const;
  /// Loss weights of the regime: (0.4, 0.6) for transbts, (0.5, 0.5) for nnunet.
  static TrainConfig for_regime(Regime regime);
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);
std::string regime_name(Regime r);
Regime parse_regime(const std::string& name);

struct Sample {
  MultiModalVolume image;
  LabelVolume labels;
};

struct EpochRecord {
  int64_t epoch = 0;  // 1-based
  double loss = 0;
  double dice_loss = 0;
  double ce_loss = 0;
  double lr = 0;
  double seconds = 0;
  int64_t steps = 0;
};

void to_json(nlohmann::json& j, const EpochRecord& r);

/// Adam with L2 weight decay folded into the gradient.
class Adam {
 public:
  Adam(std::vector<torch::Tensor> params, double weight_decay, double beta1 = 0.9, double beta2 = 0.999,
       double eps = 1e-8);

  void zero_grad();
  void step(double lr);
  int64_t steps() const { return steps_; }

  void save(Checkpoint& ckpt) const;
  void load(const Checkpoint& ckpt);

 private:
  std::vector<torch::Tensor> params_, m_, v_;
  double weight_decay_, beta1_, beta2_, eps_;
  int64_t steps_ = 0;
};

/// Dynamic loss scaling for reduced-precision training: scale grows after
/// `interval` clean steps and halves (step skipped) whenever a gradient overflows.
class LossScaler {
 public:
  explicit LossScaler(double initial = 65536.0, double growth = 2.0, double backoff = 0.5, int64_t interval = 2000);

  double scale() const { return scale_; }
  /// Divides gradients by the scale; returns false (and backs off) on inf/nan.
  bool unscale_and_check(std::span<const torch::Tensor> params);

 private:
  double scale_, growth_, backoff_;
  int64_t interval_, clean_steps_ = 0;
};

double poly_lr(double base_lr, int64_t epoch, int64_t total_epochs, double power);

struct TrainOptions {
  /// Encoder-only checkpoint produced by pretrain().
  std::optional<std::filesystem::path> init_encoder;
  /// Training checkpoint to resume from.
  std::optional<std::filesystem::path> resume;
  /// Per-epoch checkpoints and train_log.jsonl land here when set.
  std::optional<std::filesystem::path> out_dir;
  /// Receives one JSON line per epoch.
  std::ostream* log = nullptr;
  /// Background data-loading threads (0 = load on the training thread).
  int num_workers = 0;
};

struct TrainResult {
  SegModel model{nullptr};
  std::vector<EpochRecord> history;
  int64_t steps = 0;
};

TrainResult train(const ModelConfig& model_cfg, const TrainConfig& cfg, const AugmentConfig& augment,
                  std::span<const Sample> dataset, const TrainOptions& options = {});

struct PretrainResult {
  AutoencoderModel model{nullptr};
  std::vector<EpochRecord> history;  // loss = mean epoch MAE
  Checkpoint encoder;
};

PretrainResult pretrain(const ModelConfig& model_cfg, const TrainConfig& cfg, const AugmentConfig& augment,
                        std::span<const MultiModalVolume> images, const TrainOptions& options = {});

/// Full training state (model, optimizer, torch rng) after `epoch` completed epochs.
Checkpoint make_training_checkpoint(const SegModel& model, const Adam& optimizer, const TrainConfig& cfg,
                                    int64_t epoch, int64_t global_step);

/// 1 - soft dice loss of the model on the given cases (eval mode, whole volumes,
/// after the regime's preprocessing).
double soft_dice_score(SegModel& model, std::span<const Sample> cases, Regime regime);

/// Worker count from VOXSEG_NUM_WORKERS (default 0, clamped to [0, 64]).
int workers_from_env();

}  // namespace voxseg
