// SPDX-License-Identifier: Apache-2.0
#include "voxseg/postprocess.hpp"

#include <cmath>
#include <numeric>

#include <fmt/format.h>

#include "voxseg/error.hpp"

namespace voxseg {

namespace {

void check_weight_vector(const std::vector<double>& w, const char* cls, size_t m) {
  if (w.size() != m)
    throw ValidationError(fmt::format("ensemble.weights.{}: {} weights for {} members", cls, w.size(), m));
  double sum = 0;
  for (double v : w) {
    if (!(v >= 0) || !std::isfinite(v)) throw ValidationError(fmt::format("ensemble.weights.{}: negative weight", cls));
    sum += v;
  }
  if (std::abs(sum - 1.0) > 1e-6)
    throw ValidationError(fmt::format("ensemble.weights.{}: weights sum to {}, not 1", cls, sum));
}

// Union-find over voxel indices with path halving.
int64_t find_root(std::vector<int64_t>& parent, int64_t x) {
  while (parent[x] != x) {
    parent[x] = parent[parent[x]];
    x = parent[x];
  }
  return x;
}

void unite(std::vector<int64_t>& parent, int64_t a, int64_t b) {
  a = find_root(parent, a);
  b = find_root(parent, b);
  if (a == b) return;
  if (a < b) std::swap(a, b);
  parent[a] = b;
}

}  // namespace

void EnsembleWeights::validate(size_t m) const {
  if (m == 0) throw ValidationError("ensemble needs at least one member");
  check_weight_vector(ncr, "ncr", m);
  check_weight_vector(ed, "ed", m);
  check_weight_vector(et, "et", m);
}

EnsembleWeights EnsembleWeights::uniform(size_t m) {
  std::vector<double> w(m, 1.0 / static_cast<double>(m));
  return {w, w, w};
}

EnsembleWeights EnsembleWeights::two_model() { return {{0.5, 0.5}, {0.7, 0.3}, {0.6, 0.4}}; }

EnsembleWeights EnsembleWeights::three_model() {
  return {{0.359, 0.347, 0.294}, {0.253, 0.387, 0.36}, {0.295, 0.353, 0.351}};
}

void to_json(nlohmann::json& j, const EnsembleWeights& w) { j = {{"ncr", w.ncr}, {"ed", w.ed}, {"et", w.et}}; }

void from_json(const nlohmann::json& j, EnsembleWeights& w) {
  j.at("ncr").get_to(w.ncr);
  j.at("ed").get_to(w.ed);
  j.at("et").get_to(w.et);
}

torch::Tensor ensemble_scores(const std::vector<ProbabilityVolume>& members, const EnsembleWeights& w) {
  const size_t m = members.size();
  w.validate(m);
  const auto shape = members.front().shape();
  for (size_t i = 1; i < m; ++i)
    if (members[i].shape() != shape)
      throw ShapeError(fmt::format("ensemble member {} has shape {}, member 0 has {}", i,
                                   shape_string(members[i].shape()), shape_string(shape)));
  auto out = torch::zeros_like(members.front().data(), torch::kFloat64);
  for (size_t i = 0; i < m; ++i) {
    const auto p = members[i].data().to(torch::kFloat64);
    const double weights[4] = {1.0 / static_cast<double>(m), w.ncr[i], w.ed[i], w.et[i]};
    for (int64_t c = 0; c < kNumClasses; ++c) out[c].add_(p[c], weights[c]);
  }
  return out;
}

ProbabilityVolume ensemble_average(const std::vector<ProbabilityVolume>& members, const EnsembleWeights& w) {
  auto scores = ensemble_scores(members, w);
  scores.div_(scores.sum(0, true).clamp_min(1e-300));
  return ProbabilityVolume(scores.to(torch::kFloat32).clamp_(0.0, 1.0), members.front().spacing());
}

LabelVolume argmax_labels(const torch::Tensor& scores, const Spacing& spacing) {
  if (scores.dim() != 4 || scores.size(0) != kNumClasses)
    throw ShapeError("argmax_labels expects [4, D, H, W] scores");
  // torch::argmax returns the first maximal index, which is the lower-channel tie rule.
  auto channel = scores.argmax(0);
  static const auto lut = torch::tensor({0, 1, 2, 4}, torch::kUInt8);
  return LabelVolume(lut.index({channel}), spacing);
}

LabelVolume ensemble_labels(const std::vector<ProbabilityVolume>& members, const EnsembleWeights& w) {
  return argmax_labels(ensemble_scores(members, w).to(torch::kFloat32), members.front().spacing());
}

LabelVolume argmax_labels(const ProbabilityVolume& probs) { return argmax_labels(probs.data(), probs.spacing()); }

Connectivity parse_connectivity(int n) {
  if (n == 6) return Connectivity::Six;
  if (n == 26) return Connectivity::TwentySix;
  throw ValidationError(fmt::format("connectivity must be 6 or 26, got {}", n));
}

ComponentLabeling connected_components(const torch::Tensor& mask, Connectivity connectivity) {
  if (mask.dim() != 3) throw ShapeError("connected_components expects a [D, H, W] mask");
  auto m = mask.to(torch::kBool).contiguous();
  const int64_t D = m.size(0), H = m.size(1), W = m.size(2);
  const bool* in = m.data_ptr<bool>();
  const int64_t n = D * H * W;

  // Neighbours that precede the current voxel in raster order.
  std::vector<std::array<int64_t, 3>> offsets;
  for (int64_t dz = -1; dz <= 0; ++dz)
    for (int64_t dy = -1; dy <= 1; ++dy)
      for (int64_t dx = -1; dx <= 1; ++dx) {
        if (dz == 0 && (dy > 0 || (dy == 0 && dx >= 0))) continue;
        const int64_t manhattan = std::abs(dz) + std::abs(dy) + std::abs(dx);
        if (connectivity == Connectivity::Six && manhattan != 1) continue;
        offsets.push_back({dz, dy, dx});
      }

  std::vector<int64_t> parent(n, -1);
  for (int64_t z = 0; z < D; ++z)
    for (int64_t y = 0; y < H; ++y)
      for (int64_t x = 0; x < W; ++x) {
        const int64_t i = (z * H + y) * W + x;
        if (!in[i]) continue;
        parent[i] = i;
        for (const auto& [dz, dy, dx] : offsets) {
          const int64_t zz = z + dz, yy = y + dy, xx = x + dx;
          if (zz < 0 || yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
          const int64_t j = (zz * H + yy) * W + xx;
          if (in[j]) unite(parent, i, j);
        }
      }

  ComponentLabeling out;
  out.connectivity = connectivity;
  out.labels = torch::zeros({D, H, W}, torch::kInt32);
  auto* lab = out.labels.data_ptr<int32_t>();
  // Roots are the smallest index of their set, so ids come out in raster order of first voxel.
  std::vector<int32_t> id_of(n, 0);
  for (int64_t i = 0; i < n; ++i) {
    if (!in[i]) continue;
    const int64_t r = find_root(parent, i);
    if (id_of[r] == 0) {
      out.sizes.push_back(0);
      id_of[r] = static_cast<int32_t>(out.sizes.size());
    }
    lab[i] = id_of[r];
    ++out.sizes[id_of[r] - 1];
  }
  return out;
}

CcaScope parse_cca_scope(const std::string& name) {
  if (name == "whole_foreground") return CcaScope::WholeForeground;
  if (name == "per_class") return CcaScope::PerClass;
  throw ValidationError(fmt::format("unknown CCA scope '{}' (expected whole_foreground or per_class)", name));
}

std::string cca_scope_name(CcaScope s) { return s == CcaScope::WholeForeground ? "whole_foreground" : "per_class"; }

namespace {

// Clears voxels of `out` belonging to small components of `mask`.
void clear_small(torch::Tensor& out, const torch::Tensor& mask, int64_t min_size, Connectivity connectivity) {
  auto cc = connected_components(mask, connectivity);
  if (cc.count() == 0) return;
  std::vector<uint8_t> drop(cc.count() + 1, 0);
  bool any = false;
  for (int64_t k = 0; k < cc.count(); ++k)
    if (cc.sizes[k] < min_size) drop[k + 1] = 1, any = true;
  if (!any) return;
  const auto* lab = cc.labels.data_ptr<int32_t>();
  auto* dst = out.data_ptr<uint8_t>();
  for (int64_t i = 0; i < out.numel(); ++i)
    if (drop[lab[i]]) dst[i] = 0;
}

}  // namespace

LabelVolume remove_small_components(const LabelVolume& labels, int64_t min_size, Connectivity connectivity,
                                    CcaScope scope) {
  if (min_size < 0) throw ValidationError("postprocess.cca_min_size must be >= 0");
  auto out = labels.data().clone().contiguous();
  if (min_size == 0) return labels.with_data(out);
  if (scope == CcaScope::WholeForeground) {
    clear_small(out, labels.data() > 0, min_size, connectivity);
  } else {
    for (int v : {1, 2, 4}) clear_small(out, labels.data() == v, min_size, connectivity);
  }
  return labels.with_data(out);
}

LabelVolume et_replacement(const LabelVolume& labels, int64_t threshold) {
  if (threshold < 0) throw ValidationError("postprocess.et_threshold must be >= 0");
  const int64_t n = labels.count(Label::Enhancing);
  if (n == 0 || n > threshold) return labels;
  auto data = labels.data().clone();
  data.masked_fill_(data == 4, 1);
  return labels.with_data(data);
}

void PostprocessConfig::validate() const {
  if (cca_min_size < 0) throw ValidationError("postprocess.cca_min_size must be >= 0");
  if (et_threshold < 0) throw ValidationError("postprocess.et_threshold must be >= 0");
}

void to_json(nlohmann::json& j, const PostprocessConfig& c) {
  j = {{"cca_enabled", c.cca_enabled},
       {"cca_min_size", c.cca_min_size},
       {"cca_connectivity", static_cast<int>(c.cca_connectivity)},
       {"cca_scope", cca_scope_name(c.cca_scope)},
       {"et_replacement", c.et_replacement_enabled},
       {"et_threshold", c.et_threshold}};
}

void from_json(const nlohmann::json& j, PostprocessConfig& c) {
  PostprocessConfig d;
  c.cca_enabled = j.value("cca_enabled", d.cca_enabled);
  c.cca_min_size = j.value("cca_min_size", d.cca_min_size);
  c.cca_connectivity = parse_connectivity(j.value("cca_connectivity", static_cast<int>(d.cca_connectivity)));
  c.cca_scope = parse_cca_scope(j.value("cca_scope", cca_scope_name(d.cca_scope)));
  c.et_replacement_enabled = j.value("et_replacement", d.et_replacement_enabled);
  c.et_threshold = j.value("et_threshold", d.et_threshold);
}

LabelVolume postprocess(const LabelVolume& labels, const PostprocessConfig& cfg) {
  cfg.validate();
  LabelVolume out = labels;
  if (cfg.cca_enabled) out = remove_small_components(out, cfg.cca_min_size, cfg.cca_connectivity, cfg.cca_scope);
  if (cfg.et_replacement_enabled) out = et_replacement(out, cfg.et_threshold);
  return out;
}

}  // namespace voxseg
