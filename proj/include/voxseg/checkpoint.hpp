// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint archive:
//
//   "VXCK" | uint64 LE manifest length | manifest JSON | tensor payload
//
// The manifest carries format_version, epoch, model config, flags such as
// "encoder_only", and a "tensors" table of {name, shape, dtype, offset, nbytes}
// pointing into the little-endian payload. Writes go to a temp file that is
// renamed into place.
#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "voxseg/model.hpp"

namespace voxseg {

inline constexpr int kCheckpointFormatVersion = 1;

struct Checkpoint {
  nlohmann::json manifest = nlohmann::json::object();
  std::vector<std::pair<std::string, torch::Tensor>> tensors;

  /// Undefined tensor when absent.
  torch::Tensor find(const std::string& name) const;
  /// Entries whose name starts with `prefix`, prefix stripped.
  std::vector<std::pair<std::string, torch::Tensor>> with_prefix(const std::string& prefix) const;
};

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Full segmentation model (parameters + buffers under "model.").
Checkpoint make_model_checkpoint(const SegModel& model, int64_t epoch);
/// Encoder-only checkpoint from a pretrained autoencoder ("encoder_only": true).
Checkpoint make_encoder_checkpoint(const AutoencoderModel& model, int64_t epoch);

/// Rebuilds the model from the stored config and loads every tensor.
SegModel load_seg_model(const std::filesystem::path& path);
void load_model_state(const Checkpoint& ckpt, SegModel& model);
/// Loads an encoder-only (or full) checkpoint's encoder into `model`.
void load_encoder_checkpoint(const std::filesystem::path& path, SegModel& model);

}  // namespace voxseg
