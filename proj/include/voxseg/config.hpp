// SPDX-License-Identifier: Apache-2.0
//
// Pipeline configuration: one JSON document with a section per stage.
// Files and `--set a.b=value` overrides are merged over the defaults; unknown
// keys and type mismatches are reported with their dotted key path.
#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "voxseg/augment.hpp"
#include "voxseg/infer.hpp"
#include "voxseg/model.hpp"
#include "voxseg/postprocess.hpp"
#include "voxseg/train.hpp"

namespace voxseg {

struct InferenceConfig {
  Shape3 patch_size{128, 128, 128};
  MergeStrategy merge = MergeStrategy::LaterWins;
  TtaVariant tta = TtaVariant::WhdFlipsRot;
};

struct EnsembleConfig {
  /// Directories holding one predict output each.
  std::vector<std::string> members;
  EnsembleWeights weights = EnsembleWeights::two_model();
};

struct PhantomConfig {
  int64_t count = 4;
  Shape3 shape{64, 64, 64};
  double noise_sigma = 0.05;
  /// "nii.gz" or "v3d".
  std::string format = "nii.gz";
};

struct PathsConfig {
  std::string data_dir = "data";
  std::string out_dir = "out";
};

struct PipelineConfig {
  ModelConfig model;
  TrainConfig train;
  AugmentConfig augment;
  InferenceConfig inference;
  PostprocessConfig postprocess;
  EnsembleConfig ensemble;
  PhantomConfig phantom;
  PathsConfig paths;
  /// Evaluation mode: "regions" (ET/TC/WT) or "labels" (NCR/ED/ET).
  std::string evaluate_mode = "regions";

  /// Runs every section's checks; also forces augment.regime/seed to follow train.
  void validate() const;
  nlohmann::json to_json() const;
};

nlohmann::json default_config_json();

/// Builds a config from defaults, an optional JSON file and `key=value` overrides.
/// Override values parse as JSON when possible, else as plain strings.
PipelineConfig load_config(const std::filesystem::path* file, const std::vector<std::string>& overrides);

/// Same, from an already-parsed document (merged over the defaults; null means none).
PipelineConfig config_from_json(const nlohmann::json& doc, const std::vector<std::string>& overrides = {});

/// Applies one `a.b.c=value` override in place.
void apply_override(nlohmann::json& doc, const std::string& assignment);

void to_json(nlohmann::json& j, const AugmentConfig& c);
void from_json(const nlohmann::json& j, AugmentConfig& c);

}  // namespace voxseg
