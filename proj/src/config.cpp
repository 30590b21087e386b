// SPDX-License-Identifier: Apache-2.0
#include "voxseg/config.hpp"

#include <fstream>

#include <fmt/format.h>

#include "voxseg/error.hpp"
#include "voxseg/metrics.hpp"
#include "voxseg/phantom.hpp"

namespace voxseg {

namespace fs = std::filesystem;
using nlohmann::json;

void to_json(json& j, const AugmentConfig& c) {
  j = {{"intensity_factor", c.intensity_factor},
       {"crop_size", c.crop_size},
       {"scale_range", {c.scale_range.first, c.scale_range.second}},
       {"gamma_range", {c.gamma_range.first, c.gamma_range.second}},
       {"elastic_enabled", c.elastic_enabled},
       {"apply_probability", c.apply_probability},
       {"rotation_max_degrees", c.rotation_max_degrees},
       {"elastic_sigma", c.elastic_sigma},
       {"elastic_alpha_max", c.elastic_alpha_max}};
}

namespace {

std::pair<double, double> read_range(const json& j, const char* key, std::pair<double, double> fallback) {
  if (!j.contains(key)) return fallback;
  auto v = j.at(key).get<std::vector<double>>();
  if (v.size() != 2) throw ValidationError(fmt::format("augment.{} must be [low, high]", key));
  return {v[0], v[1]};
}

Shape3 read_shape(const json& j, const std::string& path) {
  if (j.is_number_integer()) {
    const auto n = j.get<int64_t>();
    return {n, n, n};
  }
  auto v = j.get<std::vector<int64_t>>();
  if (v.size() == 1) return {v[0], v[0], v[0]};
  if (v.size() != 3) throw ValidationError(fmt::format("{} must have 1 or 3 entries", path));
  return {v[0], v[1], v[2]};
}

}  // namespace

void from_json(const json& j, AugmentConfig& c) {
  c.intensity_factor = j.value("intensity_factor", c.intensity_factor);
  if (j.contains("crop_size")) c.crop_size = read_shape(j.at("crop_size"), "augment.crop_size");
  c.scale_range = read_range(j, "scale_range", c.scale_range);
  c.gamma_range = read_range(j, "gamma_range", c.gamma_range);
  c.elastic_enabled = j.value("elastic_enabled", c.elastic_enabled);
  c.apply_probability = j.value("apply_probability", c.apply_probability);
  c.rotation_max_degrees = j.value("rotation_max_degrees", c.rotation_max_degrees);
  c.elastic_sigma = j.value("elastic_sigma", c.elastic_sigma);
  c.elastic_alpha_max = j.value("elastic_alpha_max", c.elastic_alpha_max);
}

json PipelineConfig::to_json() const {
  json j;
  j["model"] = model;
  j["train"] = train;
  j["augment"] = augment;
  j["inference"] = {{"patch_size", inference.patch_size},
                    {"merge_strategy", merge_strategy_name(inference.merge)},
                    {"tta_variant", tta_variant_name(inference.tta)}};
  j["postprocess"] = postprocess;
  j["ensemble"] = {{"members", ensemble.members}, {"weights", ensemble.weights}};
  j["phantom"] = {{"count", phantom.count},
                  {"shape", phantom.shape},
                  {"noise_sigma", phantom.noise_sigma},
                  {"format", phantom.format}};
  j["paths"] = {{"data_dir", paths.data_dir}, {"out_dir", paths.out_dir}};
  j["evaluate"] = {{"mode", evaluate_mode}};
  return j;
}

json default_config_json() {
  auto j = PipelineConfig{}.to_json();
  // Null means "follow train.regime".
  j["train"]["loss_weights"] = nullptr;
  return j;
}

void PipelineConfig::validate() const {
  model.validate();
  train.validate();
  augment.validate();
  postprocess.validate();
  const int64_t div = model.size_divisor();
  for (int a = 0; a < 3; ++a)
    if (inference.patch_size[a] < 1 || inference.patch_size[a] % div != 0)
      throw ValidationError(fmt::format("inference.patch_size: {} is not a positive multiple of {}",
                                        inference.patch_size[a], div));
  for (int a = 0; a < 3; ++a)
    if (augment.crop_size[a] % div != 0)
      throw ValidationError(
          fmt::format("augment.crop_size: {} is not a multiple of {}", augment.crop_size[a], div));
  if (!ensemble.members.empty()) {
    try {
      ensemble.weights.validate(ensemble.members.size());
    } catch (const ValidationError& e) {
      throw ValidationError(fmt::format("ensemble.weights: {}", e.what()));
    }
  }
  if (phantom.count < 1) throw ValidationError("phantom.count must be >= 1");
  for (auto d : phantom.shape)
    if (d < kMinPhantomDim) throw ValidationError(fmt::format("phantom.shape entries must be >= {}", kMinPhantomDim));
  if (!(phantom.noise_sigma >= 0)) throw ValidationError("phantom.noise_sigma must be >= 0");
  if (phantom.format != "nii.gz" && phantom.format != "v3d")
    throw ValidationError(fmt::format("phantom.format must be nii.gz or v3d, got '{}'", phantom.format));
  parse_eval_mode(evaluate_mode);
}

namespace {

bool type_compatible(const json& def, const json& val) {
  if (def.is_null()) return true;
  if (def.is_boolean()) return val.is_boolean();
  if (def.is_number_integer()) return val.is_number_integer();
  if (def.is_number()) return val.is_number();
  if (def.is_string()) return val.is_string();
  // Shapes accept a single integer for cubes.
  if (def.is_array()) return val.is_array() || val.is_number_integer();
  if (def.is_object()) return val.is_object();
  return false;
}

std::string type_label(const json& def) {
  if (def.is_boolean()) return "a boolean";
  if (def.is_number_integer()) return "an integer";
  if (def.is_number()) return "a number";
  if (def.is_string()) return "a string";
  if (def.is_array()) return "an array";
  return "an object";
}

void merge_into(json& base, const json& patch, const std::string& prefix) {
  if (!patch.is_object()) throw ValidationError(fmt::format("config{}: expected an object", prefix.empty() ? "" : " key '" + prefix + "'"));
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    const std::string path = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!base.contains(it.key())) throw ValidationError(fmt::format("unknown config key '{}'", path));
    auto& slot = base[it.key()];
    if (slot.is_object() && it.value().is_object()) {
      merge_into(slot, it.value(), path);
      continue;
    }
    if (!type_compatible(slot, it.value()))
      throw ValidationError(fmt::format("config key '{}' must be {}, got {}", path, type_label(slot), it.value().dump()));
    slot = it.value();
  }
}

template <typename T>
T section(const json& doc, const char* key) {
  try {
    return doc.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ValidationError(fmt::format("config section '{}': {}", key, e.what()));
  }
}

}  // namespace

void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ValidationError(fmt::format("override '{}' is not of the form key=value", assignment));
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, /*allow_exceptions=*/false);
  if (value.is_discarded()) value = text;

  // Build a nested patch {"a": {"b": value}} and merge it so checks match file input.
  std::vector<std::string> parts;
  size_t pos = 0;
  while (true) {
    const auto dot = key.find('.', pos);
    parts.push_back(key.substr(pos, dot == std::string::npos ? std::string::npos : dot - pos));
    if (parts.back().empty()) throw ValidationError(fmt::format("override key '{}' has an empty component", key));
    if (dot == std::string::npos) break;
    pos = dot + 1;
  }
  json patch = value;
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) {
    json wrapped = json::object();
    wrapped[*it] = std::move(patch);
    patch = std::move(wrapped);
  }
  merge_into(doc, patch, "");
}

PipelineConfig config_from_json(const json& input, const std::vector<std::string>& overrides) {
  json doc = default_config_json();
  if (!input.is_null()) merge_into(doc, input, "");
  for (const auto& o : overrides) apply_override(doc, o);

  PipelineConfig cfg;
  cfg.model = section<ModelConfig>(doc, "model");
  auto train = doc.at("train");
  const bool explicit_weights = !train.at("loss_weights").is_null();
  if (!explicit_weights) train.erase("loss_weights");
  try {
    cfg.train = train.get<TrainConfig>();
  } catch (const json::exception& e) {
    throw ValidationError(fmt::format("config section 'train': {}", e.what()));
  }
  if (!explicit_weights) {
    const auto d = TrainConfig::for_regime(cfg.train.regime);
    cfg.train.w_dice = d.w_dice;
    cfg.train.w_ce = d.w_ce;
  }
  cfg.augment = section<AugmentConfig>(doc, "augment");
  cfg.augment.regime = cfg.train.regime;
  cfg.augment.seed = cfg.train.seed;

  const auto& inf = doc.at("inference");
  try {
    cfg.inference.patch_size = read_shape(inf.at("patch_size"), "inference.patch_size");
  } catch (const json::exception& e) {
    throw ValidationError(fmt::format("inference.patch_size: {}", e.what()));
  }
  cfg.inference.merge = parse_merge_strategy(inf.at("merge_strategy").get<std::string>());
  cfg.inference.tta = parse_tta_variant(inf.at("tta_variant").get<std::string>());

  cfg.postprocess = section<PostprocessConfig>(doc, "postprocess");
  cfg.ensemble.members = section<std::vector<std::string>>(doc.at("ensemble"), "members");
  cfg.ensemble.weights = section<EnsembleWeights>(doc.at("ensemble"), "weights");

  const auto& ph = doc.at("phantom");
  cfg.phantom.count = ph.at("count").get<int64_t>();
  try {
    cfg.phantom.shape = read_shape(ph.at("shape"), "phantom.shape");
  } catch (const json::exception& e) {
    throw ValidationError(fmt::format("phantom.shape: {}", e.what()));
  }
  cfg.phantom.noise_sigma = ph.at("noise_sigma").get<double>();
  cfg.phantom.format = ph.at("format").get<std::string>();
  cfg.paths.data_dir = doc.at("paths").at("data_dir").get<std::string>();
  cfg.paths.out_dir = doc.at("paths").at("out_dir").get<std::string>();
  cfg.evaluate_mode = doc.at("evaluate").at("mode").get<std::string>();
  cfg.validate();
  return cfg;
}

PipelineConfig load_config(const fs::path* file, const std::vector<std::string>& overrides) {
  json input = json::object();
  if (file) {
    std::ifstream in(*file);
    if (!in) throw ValidationError(fmt::format("config file '{}' not found", file->string()));
    try {
      input = json::parse(in);
    } catch (const json::parse_error& e) {
      throw ValidationError(fmt::format("config file '{}': {}", file->string(), e.what()));
    }
  }
  return config_from_json(input, overrides);
}

}  // namespace voxseg
