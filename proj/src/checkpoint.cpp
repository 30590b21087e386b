// SPDX-License-Identifier: Apache-2.0
#include "voxseg/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <unordered_map>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "voxseg/error.hpp"

namespace voxseg {

namespace fs = std::filesystem;

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint payload assumes a little-endian host");

const char* dtype_name(torch::ScalarType t) {
  switch (t) {
    case torch::kFloat32: return "float32";
    case torch::kFloat64: return "float64";
    case torch::kInt64: return "int64";
    case torch::kUInt8: return "uint8";
    default: throw ValidationError(fmt::format("checkpoint cannot store dtype {}", c10::toString(t)));
  }
}

torch::ScalarType dtype_from(const std::string& name) {
  if (name == "float32") return torch::kFloat32;
  if (name == "float64") return torch::kFloat64;
  if (name == "int64") return torch::kInt64;
  if (name == "uint8") return torch::kUInt8;
  throw IoError(fmt::format("checkpoint: unknown dtype '{}'", name));
}

}  // namespace

torch::Tensor Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return t;
  return {};
}

std::vector<std::pair<std::string, torch::Tensor>> Checkpoint::with_prefix(const std::string& prefix) const {
  std::vector<std::pair<std::string, torch::Tensor>> out;
  for (const auto& [n, t] : tensors)
    if (n.rfind(prefix, 0) == 0) out.emplace_back(n.substr(prefix.size()), t);
  return out;
}

void write_checkpoint(const fs::path& path, const Checkpoint& ckpt) {
  auto manifest = ckpt.manifest;
  manifest["format_version"] = kCheckpointFormatVersion;
  auto table = nlohmann::json::array();
  std::vector<torch::Tensor> payload;
  uint64_t offset = 0;
  for (const auto& [name, t] : ckpt.tensors) {
    auto c = t.detach().contiguous().cpu();
    const uint64_t nbytes = c.numel() * c.element_size();
    table.push_back({{"name", name},
                     {"shape", c.sizes().vec()},
                     {"dtype", dtype_name(c.scalar_type())},
                     {"offset", offset},
                     {"nbytes", nbytes}});
    offset += nbytes;
    payload.push_back(std::move(c));
  }
  manifest["tensors"] = std::move(table);
  const std::string text = manifest.dump();

  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(fmt::format("cannot write '{}'", tmp.string()));
    const uint64_t len = text.size();
    out.write("VXCK", 4);
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& c : payload)
      out.write(static_cast<const char*>(c.data_ptr()), static_cast<std::streamsize>(c.numel() * c.element_size()));
    if (!out) throw IoError(fmt::format("write to '{}' failed", tmp.string()));
  }
  fs::rename(tmp, path);
}

Checkpoint read_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(fmt::format("cannot open checkpoint '{}'", path.string()));
  char magic[4];
  uint64_t len = 0;
  in.read(magic, 4);
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!in || std::memcmp(magic, "VXCK", 4) != 0) throw IoError(fmt::format("'{}' is not a checkpoint", path.string()));
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw IoError(fmt::format("'{}': truncated manifest", path.string()));

  Checkpoint ckpt;
  try {
    ckpt.manifest = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(fmt::format("'{}': bad manifest: {}", path.string(), e.what()));
  }
  if (ckpt.manifest.value("format_version", 0) != kCheckpointFormatVersion)
    throw IoError(fmt::format("'{}': unsupported checkpoint version", path.string()));

  const auto base = in.tellg();
  for (const auto& entry : ckpt.manifest.at("tensors")) {
    auto shape = entry.at("shape").get<std::vector<int64_t>>();
    auto t = torch::empty(shape, torch::TensorOptions().dtype(dtype_from(entry.at("dtype").get<std::string>())));
    const auto nbytes = entry.at("nbytes").get<uint64_t>();
    if (nbytes != static_cast<uint64_t>(t.numel() * t.element_size()))
      throw IoError(fmt::format("'{}': size mismatch for '{}'", path.string(), entry.at("name").get<std::string>()));
    in.seekg(base + static_cast<std::streamoff>(entry.at("offset").get<uint64_t>()));
    in.read(static_cast<char*>(t.data_ptr()), static_cast<std::streamsize>(nbytes));
    if (!in) throw IoError(fmt::format("'{}': truncated payload", path.string()));
    ckpt.tensors.emplace_back(entry.at("name").get<std::string>(), t);
  }
  ckpt.manifest.erase("tensors");
  return ckpt;
}

Checkpoint make_model_checkpoint(const SegModel& model, int64_t epoch) {
  Checkpoint ckpt;
  ckpt.manifest["kind"] = "segmentation";
  ckpt.manifest["encoder_only"] = false;
  ckpt.manifest["epoch"] = epoch;
  ckpt.manifest["model_config"] = model->config();
  for (auto& [name, t] : named_state(*model)) ckpt.tensors.emplace_back("model." + name, t);
  return ckpt;
}

Checkpoint make_encoder_checkpoint(const AutoencoderModel& model, int64_t epoch) {
  Checkpoint ckpt;
  ckpt.manifest["kind"] = "autoencoder";
  ckpt.manifest["encoder_only"] = true;
  ckpt.manifest["epoch"] = epoch;
  ckpt.manifest["model_config"] = model->config();
  for (auto& [name, t] : named_state(*model->encoder, "encoder.")) ckpt.tensors.emplace_back("model." + name, t);
  return ckpt;
}

void load_model_state(const Checkpoint& ckpt, SegModel& model) {
  std::unordered_map<std::string, torch::Tensor> stored;
  for (auto& [name, t] : ckpt.with_prefix("model.")) stored.emplace(name, t);
  auto targets = named_state(*model);
  if (stored.size() != targets.size())
    throw ValidationError(
        fmt::format("checkpoint mismatch: {} stored tensors vs {} in model", stored.size(), targets.size()));
  torch::NoGradGuard guard;
  for (auto& [name, t] : targets) {
    auto it = stored.find(name);
    if (it == stored.end()) throw ValidationError(fmt::format("checkpoint mismatch: '{}' missing", name));
    if (it->second.sizes() != t.sizes())
      throw ValidationError(fmt::format("checkpoint mismatch: '{}' has shape [{}], model expects [{}]", name,
                                        fmt::join(it->second.sizes(), ","), fmt::join(t.sizes(), ",")));
    if (it->second.scalar_type() != t.scalar_type()) t.set_data(t.to(it->second.scalar_type()));
    t.copy_(it->second);
  }
}

SegModel load_seg_model(const fs::path& path) {
  auto ckpt = read_checkpoint(path);
  if (ckpt.manifest.value("encoder_only", false))
    throw ValidationError(fmt::format("'{}' is an encoder-only checkpoint", path.string()));
  auto cfg = ckpt.manifest.at("model_config").get<ModelConfig>();
  SegModel model(cfg);
  load_model_state(ckpt, model);
  return model;
}

void load_encoder_checkpoint(const fs::path& path, SegModel& model) {
  auto ckpt = read_checkpoint(path);
  std::vector<std::pair<std::string, torch::Tensor>> encoder;
  for (auto& [name, t] : ckpt.with_prefix("model."))
    if (name.rfind("encoder.", 0) == 0) encoder.emplace_back(name, t);
  load_encoder_state(encoder, model);
}

}  // namespace voxseg
