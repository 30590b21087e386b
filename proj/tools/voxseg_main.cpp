// SPDX-License-Identifier: Apache-2.0
//
// voxseg: phantom | pretrain | train | predict | postprocess | ensemble | evaluate
//
// Exit codes: 0 success, 2 invalid input or configuration, 1 runtime failure.
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "voxseg/error.hpp"
#include "voxseg/pipeline.hpp"

namespace fs = std::filesystem;
using namespace voxseg;

int main(int argc, char** argv) {
  CLI::App app{"Brain tumour segmentation pipeline on 4-modality MRI volumes"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path, out_dir;
  std::vector<std::string> overrides;
  std::optional<uint64_t> seed;
  app.add_option("--config", config_path, "JSON config file")->check(CLI::ExistingFile);
  app.add_option("--set", overrides, "Override a config value, e.g. train.epochs=2 (repeatable)");
  app.add_option("--seed", seed, "Seed for phantoms, training and augmentation");
  app.add_option("--out", out_dir, "Output directory (default: paths.out_dir)");

  std::string data_dir, model_path, pred_dir, init_encoder, resume;
  std::vector<std::string> members;
  bool overlay = false;

  auto* phantom = app.add_subcommand("phantom", "Write synthetic cases and a manifest");
  auto* pre = app.add_subcommand("pretrain", "Pretrain the encoder as an autoencoder");
  pre->add_option("--data", data_dir, "Dataset directory (default: paths.data_dir)");
  auto* tr = app.add_subcommand("train", "Train the segmentation model");
  tr->add_option("--data", data_dir, "Dataset directory (default: paths.data_dir)");
  tr->add_option("--init-encoder", init_encoder, "Encoder checkpoint from pretrain");
  tr->add_option("--resume", resume, "Training checkpoint to resume");
  auto* pr = app.add_subcommand("predict", "Predict probabilities and labels");
  pr->add_option("--model", model_path, "Model checkpoint")->required();
  pr->add_option("--data", data_dir, "Dataset directory (default: paths.data_dir)");
  auto* pp = app.add_subcommand("postprocess", "Component filtering and ET replacement");
  pp->add_option("--pred", pred_dir, "Prediction directory")->required();
  auto* en = app.add_subcommand("ensemble", "Per-class weighted fusion of predictions");
  en->add_option("--member", members, "Prediction directory (repeatable; default: ensemble.members)");
  auto* ev = app.add_subcommand("evaluate", "Dice / HD95 / sensitivity / specificity report");
  ev->add_option("--pred", pred_dir, "Prediction directory")->required();
  ev->add_option("--data", data_dir, "Ground-truth dataset directory (default: paths.data_dir)");
  ev->add_flag("--overlay", overlay, "Also write mid-axial PNG overlays");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (seed) overrides.push_back(fmt::format("train.seed={}", *seed));
    const fs::path cfg_file(config_path);
    auto cfg = load_config(config_path.empty() ? nullptr : &cfg_file, overrides);
    if (!out_dir.empty()) cfg.paths.out_dir = out_dir;
    const fs::path out(cfg.paths.out_dir);
    const fs::path data(data_dir.empty() ? cfg.paths.data_dir : data_dir);

    if (*phantom) {
      cmd_phantom(cfg, cfg.train.seed, out);
    } else if (*pre) {
      cmd_pretrain(cfg, data, out, &std::cout);
    } else if (*tr) {
      std::optional<fs::path> init, res;
      if (!init_encoder.empty()) init = init_encoder;
      if (!resume.empty()) res = resume;
      cmd_train(cfg, data, out, init, res, &std::cout);
    } else if (*pr) {
      cmd_predict(cfg, model_path, data, out);
    } else if (*pp) {
      cmd_postprocess(cfg, pred_dir, out);
    } else if (*en) {
      std::vector<fs::path> dirs(members.begin(), members.end());
      if (dirs.empty()) dirs.assign(cfg.ensemble.members.begin(), cfg.ensemble.members.end());
      cmd_ensemble(cfg, dirs, out);
    } else if (*ev) {
      auto report = cmd_evaluate(cfg, pred_dir, data, out, overlay);
      std::cout << report.to_table();
    }
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
