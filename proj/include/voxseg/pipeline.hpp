// SPDX-License-Identifier: Apache-2.0
//
// Command implementations behind the voxseg CLI. Each command reads declared
// inputs, writes into its output directory, and leaves `config.json` there
// with the fully resolved configuration.
//
// Directory contract: a dataset or prediction directory holds manifest.json,
// {"cases": [{"case_id": ..., <role>: "<file name>", ...}]}, where roles are
// "image" and "label" for data and "probabilities" and "label" for predictions.
#pragma once

#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "voxseg/config.hpp"
#include "voxseg/metrics.hpp"

namespace voxseg {

struct CaseEntry {
  std::string case_id;
  std::filesystem::path image;          // data only
  std::filesystem::path label;
  std::filesystem::path probabilities;  // predictions only
};

/// Reads <dir>/manifest.json; paths come back absolute.
std::vector<CaseEntry> read_manifest(const std::filesystem::path& dir);
void write_manifest(const std::filesystem::path& dir, const std::vector<CaseEntry>& cases,
                    const nlohmann::json& extra = nlohmann::json::object());

void write_resolved_config(const std::filesystem::path& dir, const PipelineConfig& cfg);

std::vector<Sample> load_dataset(const std::filesystem::path& dir);

/// Regime preprocessing of one raw image, tiled prediction (with TTA), and the
/// result placed back on the original grid (background outside any crop).
ProbabilityVolume predict_case(const Segmenter& model, const MultiModalVolume& raw, Regime regime,
                               const InferenceConfig& inference);

struct PredictedCase {
  std::string case_id;
  ProbabilityVolume probabilities;
  LabelVolume labels;
};

void cmd_phantom(const PipelineConfig& cfg, uint64_t seed, const std::filesystem::path& out_dir);
void cmd_pretrain(const PipelineConfig& cfg, const std::filesystem::path& data_dir, const std::filesystem::path& out_dir,
                  std::ostream* log = nullptr);
void cmd_train(const PipelineConfig& cfg, const std::filesystem::path& data_dir, const std::filesystem::path& out_dir,
               const std::optional<std::filesystem::path>& init_encoder,
               const std::optional<std::filesystem::path>& resume, std::ostream* log = nullptr);
void cmd_predict(const PipelineConfig& cfg, const std::filesystem::path& model_path,
                 const std::filesystem::path& data_dir, const std::filesystem::path& out_dir);
void cmd_postprocess(const PipelineConfig& cfg, const std::filesystem::path& pred_dir,
                     const std::filesystem::path& out_dir);
void cmd_ensemble(const PipelineConfig& cfg, const std::vector<std::filesystem::path>& member_dirs,
                  const std::filesystem::path& out_dir);
SetReport cmd_evaluate(const PipelineConfig& cfg, const std::filesystem::path& pred_dir,
                       const std::filesystem::path& data_dir, const std::filesystem::path& out_dir, bool overlay);

/// Mid-axial slice (middle of the W axis) rendered as two panels, prediction
/// then ground truth, over the first image channel. NCR red, ED green, ET yellow.
void write_overlay_png(const std::filesystem::path& path, const MultiModalVolume& image, const LabelVolume& pred,
                       const LabelVolume& gt);

}  // namespace voxseg
