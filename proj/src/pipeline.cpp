// SPDX-License-Identifier: Apache-2.0
#include "voxseg/pipeline.hpp"

#include <fstream>

#include <fmt/format.h>
#include <png.h>

#include "voxseg/checkpoint.hpp"
#include "voxseg/error.hpp"
#include "voxseg/io.hpp"
#include "voxseg/phantom.hpp"

namespace voxseg {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void require_dir(const fs::path& dir, const char* what) {
  if (!fs::is_directory(dir)) throw ValidationError(fmt::format("{}: directory '{}' does not exist", what, dir.string()));
}

void require_file(const fs::path& file, const char* what) {
  if (!fs::is_regular_file(file)) throw ValidationError(fmt::format("{}: file '{}' does not exist", what, file.string()));
}

}  // namespace

std::vector<CaseEntry> read_manifest(const fs::path& dir) {
  const auto path = dir / "manifest.json";
  require_file(path, "manifest");
  std::ifstream in(path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw IoError(fmt::format("'{}': {}", path.string(), e.what()));
  }
  std::vector<CaseEntry> out;
  const auto abs = fs::absolute(dir);
  for (const auto& c : j.at("cases")) {
    CaseEntry e;
    e.case_id = c.at("case_id").get<std::string>();
    if (c.contains("image")) e.image = abs / c.at("image").get<std::string>();
    if (c.contains("label")) e.label = abs / c.at("label").get<std::string>();
    if (c.contains("probabilities")) e.probabilities = abs / c.at("probabilities").get<std::string>();
    out.push_back(std::move(e));
  }
  if (out.empty()) throw ValidationError(fmt::format("'{}' lists no cases", path.string()));
  return out;
}

void write_manifest(const fs::path& dir, const std::vector<CaseEntry>& cases, const json& extra) {
  json j = extra;
  j["cases"] = json::array();
  for (const auto& c : cases) {
    json e{{"case_id", c.case_id}};
    if (!c.image.empty()) e["image"] = c.image.filename().string();
    if (!c.label.empty()) e["label"] = c.label.filename().string();
    if (!c.probabilities.empty()) e["probabilities"] = c.probabilities.filename().string();
    j["cases"].push_back(std::move(e));
  }
  std::ofstream(dir / "manifest.json") << j.dump(2) << '\n';
}

void write_resolved_config(const fs::path& dir, const PipelineConfig& cfg) {
  fs::create_directories(dir);
  std::ofstream(dir / "config.json") << cfg.to_json().dump(2) << '\n';
}

std::vector<Sample> load_dataset(const fs::path& dir) {
  std::vector<Sample> out;
  for (const auto& c : read_manifest(dir)) {
    if (c.image.empty() || c.label.empty())
      throw ValidationError(fmt::format("case '{}' needs both image and label", c.case_id));
    auto img = load_image(c.image);
    out.push_back({MultiModalVolume(img.data(), img.spacing(), c.case_id), load_labels(c.label)});
    if (out.back().labels.shape() != img.shape())
      throw ValidationError(fmt::format("case '{}': label shape {} differs from image shape {}", c.case_id,
                                        shape_string(out.back().labels.shape()), shape_string(img.shape())));
  }
  return out;
}

ProbabilityVolume predict_case(const Segmenter& model, const MultiModalVolume& raw, Regime regime,
                               const InferenceConfig& inference) {
  const PredictOptions opts{inference.patch_size, inference.merge, inference.tta};
  if (regime == Regime::TransBTS) {
    auto probs = predict_volume(model, zscore_normalize(raw, NormalizeMode::Whole), opts);
    return ProbabilityVolume(probs.data(), raw.spacing());
  }
  const auto shape = raw.shape();
  auto crop = nonzero_crop(raw, LabelVolume(torch::zeros({shape[0], shape[1], shape[2]}, torch::kUInt8), raw.spacing()));
  auto probs = predict_volume(model, zscore_normalize(crop.image, NormalizeMode::Nonzero), opts);
  auto full = torch::zeros({kNumClasses, shape[0], shape[1], shape[2]});
  full[0].fill_(1.0f);
  const auto& b = crop.bbox;
  full.narrow(1, b.lo[0], b.hi[0] - b.lo[0])
      .narrow(2, b.lo[1], b.hi[1] - b.lo[1])
      .narrow(3, b.lo[2], b.hi[2] - b.lo[2])
      .copy_(probs.data());
  return ProbabilityVolume(full, raw.spacing());
}

void cmd_phantom(const PipelineConfig& cfg, uint64_t seed, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  const auto ext = "." + cfg.phantom.format;
  std::vector<CaseEntry> cases;
  for (int64_t i = 0; i < cfg.phantom.count; ++i) {
    auto [img, lab] = generate_phantom(seed + static_cast<uint64_t>(i), cfg.phantom.shape, {cfg.phantom.noise_sigma});
    CaseEntry e{img.case_id(), out_dir / (img.case_id() + "_image" + ext), out_dir / (img.case_id() + "_label" + ext), {}};
    save_image(img, e.image);
    save_label_volume(lab, e.label);
    cases.push_back(std::move(e));
  }
  write_manifest(out_dir, cases, {{"seed", seed}, {"shape", cfg.phantom.shape}});
  write_resolved_config(out_dir, cfg);
}

void cmd_pretrain(const PipelineConfig& cfg, const fs::path& data_dir, const fs::path& out_dir, std::ostream* log) {
  require_dir(data_dir, "paths.data_dir");
  std::vector<MultiModalVolume> images;
  for (const auto& c : read_manifest(data_dir)) {
    auto img = load_image(c.image);
    images.emplace_back(img.data(), img.spacing(), c.case_id);
  }
  write_resolved_config(out_dir, cfg);
  TrainOptions opts;
  opts.out_dir = out_dir;
  opts.log = log;
  opts.num_workers = workers_from_env();
  pretrain(cfg.model, cfg.train, cfg.augment, images, opts);
}

void cmd_train(const PipelineConfig& cfg, const fs::path& data_dir, const fs::path& out_dir,
               const std::optional<fs::path>& init_encoder, const std::optional<fs::path>& resume, std::ostream* log) {
  require_dir(data_dir, "paths.data_dir");
  if (init_encoder) require_file(*init_encoder, "--init-encoder");
  if (resume) require_file(*resume, "--resume");
  const auto dataset = load_dataset(data_dir);
  write_resolved_config(out_dir, cfg);
  TrainOptions opts;
  opts.init_encoder = init_encoder;
  opts.resume = resume;
  opts.out_dir = out_dir;
  opts.log = log;
  opts.num_workers = workers_from_env();
  train(cfg.model, cfg.train, cfg.augment, dataset, opts);
}

void cmd_predict(const PipelineConfig& cfg, const fs::path& model_path, const fs::path& data_dir,
                 const fs::path& out_dir) {
  require_file(model_path, "--model");
  require_dir(data_dir, "paths.data_dir");
  auto model = load_seg_model(model_path);
  const int64_t div = model->config().size_divisor();
  for (auto p : cfg.inference.patch_size)
    if (p % div != 0)
      throw ValidationError(fmt::format("inference.patch_size: {} is not a multiple of the model's {}", p, div));
  const auto segmenter = as_segmenter(model);
  const auto cases = read_manifest(data_dir);
  write_resolved_config(out_dir, cfg);
  std::vector<CaseEntry> written;
  for (const auto& c : cases) {
    auto img = load_image(c.image);
    auto probs = predict_case(segmenter, MultiModalVolume(img.data(), img.spacing(), c.case_id), cfg.train.regime,
                              cfg.inference);
    CaseEntry e{c.case_id, {}, out_dir / (c.case_id + "_label.nii.gz"), out_dir / (c.case_id + "_prob.v3d")};
    save_probabilities(probs, e.probabilities);
    save_label_volume(argmax_labels(probs), e.label);
    written.push_back(std::move(e));
  }
  write_manifest(out_dir, written, {{"model", fs::absolute(model_path).string()}});
}

void cmd_postprocess(const PipelineConfig& cfg, const fs::path& pred_dir, const fs::path& out_dir) {
  require_dir(pred_dir, "--pred");
  const auto cases = read_manifest(pred_dir);
  write_resolved_config(out_dir, cfg);
  std::vector<CaseEntry> written;
  for (const auto& c : cases) {
    auto labels = postprocess(load_labels(c.label), cfg.postprocess);
    CaseEntry e{c.case_id, {}, out_dir / (c.case_id + "_label.nii.gz"), {}};
    save_label_volume(labels, e.label);
    written.push_back(std::move(e));
  }
  write_manifest(out_dir, written);
}

void cmd_ensemble(const PipelineConfig& cfg, const std::vector<fs::path>& member_dirs, const fs::path& out_dir) {
  if (member_dirs.empty()) throw ValidationError("ensemble.members: no member directories given");
  try {
    cfg.ensemble.weights.validate(member_dirs.size());
  } catch (const ValidationError& e) {
    throw ValidationError(fmt::format("ensemble.weights: {}", e.what()));
  }
  std::vector<std::vector<CaseEntry>> manifests;
  for (const auto& d : member_dirs) {
    require_dir(d, "ensemble.members");
    manifests.push_back(read_manifest(d));
  }
  write_resolved_config(out_dir, cfg);
  std::vector<CaseEntry> written;
  for (const auto& c : manifests.front()) {
    std::vector<ProbabilityVolume> members;
    for (size_t m = 0; m < manifests.size(); ++m) {
      auto it = std::find_if(manifests[m].begin(), manifests[m].end(),
                             [&](const CaseEntry& e) { return e.case_id == c.case_id; });
      if (it == manifests[m].end() || it->probabilities.empty())
        throw ValidationError(fmt::format("ensemble member '{}' has no probabilities for case '{}'",
                                          member_dirs[m].string(), c.case_id));
      members.push_back(load_probabilities(it->probabilities));
    }
    auto fused = ensemble_average(members, cfg.ensemble.weights);
    CaseEntry e{c.case_id, {}, out_dir / (c.case_id + "_label.nii.gz"), out_dir / (c.case_id + "_prob.v3d")};
    save_probabilities(fused, e.probabilities);
    save_label_volume(ensemble_labels(members, cfg.ensemble.weights), e.label);
    written.push_back(std::move(e));
  }
  write_manifest(out_dir, written);
}

SetReport cmd_evaluate(const PipelineConfig& cfg, const fs::path& pred_dir, const fs::path& data_dir,
                       const fs::path& out_dir, bool overlay) {
  require_dir(pred_dir, "--pred");
  require_dir(data_dir, "paths.data_dir");
  const auto preds = read_manifest(pred_dir);
  const auto truth = read_manifest(data_dir);
  const auto mode = parse_eval_mode(cfg.evaluate_mode);
  write_resolved_config(out_dir, cfg);
  std::vector<MetricsReport> reports;
  for (const auto& p : preds) {
    auto it = std::find_if(truth.begin(), truth.end(), [&](const CaseEntry& e) { return e.case_id == p.case_id; });
    if (it == truth.end())
      throw ValidationError(fmt::format("no ground truth for predicted case '{}' in '{}'", p.case_id, data_dir.string()));
    const auto pred = load_labels(p.label);
    const auto gt = load_labels(it->label);
    reports.push_back(evaluate_case(pred, gt, p.case_id, mode));
    if (overlay) {
      fs::create_directories(out_dir / "overlays");
      write_overlay_png(out_dir / "overlays" / (p.case_id + ".png"), load_image(it->image), pred, gt);
    }
  }
  auto report = aggregate(std::move(reports));
  std::ofstream(out_dir / "report.json") << report.to_json().dump(2) << '\n';
  std::ofstream(out_dir / "report.txt") << report.to_table();
  return report;
}

void write_overlay_png(const fs::path& path, const MultiModalVolume& image, const LabelVolume& pred,
                       const LabelVolume& gt) {
  if (pred.shape() != image.shape() || gt.shape() != image.shape())
    throw ShapeError("overlay inputs differ in shape");
  const auto [D, H, W] = image.shape();
  const int64_t w = W / 2;
  // Slice [D, H]: x along D (columns), y along H (rows).
  auto base = image.data()[0].select(2, w).to(torch::kFloat64);
  const double lo = base.min().item<double>(), hi = base.max().item<double>();
  base = hi > lo ? (base - lo) / (hi - lo) : torch::zeros_like(base);
  auto gray = base.contiguous();
  auto p = pred.data().select(2, w).contiguous();
  auto g = gt.data().select(2, w).contiguous();

  const int64_t width = 2 * D, height = H;
  std::vector<uint8_t> rgb(static_cast<size_t>(width * height * 3));
  auto paint = [&](int64_t panel, const torch::Tensor& lab) {
    const auto* l = lab.data_ptr<uint8_t>();
    const auto* v = gray.data_ptr<double>();
    for (int64_t x = 0; x < D; ++x)
      for (int64_t y = 0; y < H; ++y) {
        const double gv = v[x * H + y] * 255.0;
        double c[3] = {gv, gv, gv};
        const double* tint = nullptr;
        static const double kRed[3] = {255, 0, 0}, kGreen[3] = {0, 255, 0}, kYellow[3] = {255, 255, 0};
        switch (l[x * H + y]) {
          case 1: tint = kRed; break;
          case 2: tint = kGreen; break;
          case 4: tint = kYellow; break;
          default: break;
        }
        if (tint)
          for (int k = 0; k < 3; ++k) c[k] = 0.5 * c[k] + 0.5 * tint[k];
        auto* px = &rgb[static_cast<size_t>(((y * width) + panel * D + x) * 3)];
        for (int k = 0; k < 3; ++k) px[k] = static_cast<uint8_t>(std::lround(std::clamp(c[k], 0.0, 255.0)));
      }
  };
  paint(0, p);
  paint(1, g);

  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(width);
  img.height = static_cast<png_uint_32>(height);
  img.format = PNG_FORMAT_RGB;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  if (!png_image_write_to_file(&img, path.c_str(), 0, rgb.data(), 0, nullptr))
    throw IoError(fmt::format("cannot write PNG '{}': {}", path.string(), img.message));
}

}  // namespace voxseg
