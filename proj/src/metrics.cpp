// SPDX-License-Identifier: Apache-2.0
#include "voxseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include <fmt/format.h>

#include "voxseg/error.hpp"

namespace voxseg {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

torch::Tensor as_mask(const torch::Tensor& t, const char* what) {
  if (t.dim() != 3) throw ShapeError(fmt::format("{} must be a [D, H, W] mask", what));
  return t.to(torch::kBool).contiguous();
}

void check_same_shape(const torch::Tensor& a, const torch::Tensor& b) {
  if (a.sizes() != b.sizes()) throw ShapeError("metric inputs differ in shape");
}

// Squared distance transform of a sampled function along one line
// (lower envelope of parabolas). `f` holds squared distances or +inf;
// sample i sits at i * step.
void edt_1d(const double* f, double* out, int64_t n, double step, std::vector<int64_t>& v, std::vector<double>& z) {
  v.resize(n);
  z.resize(n + 1);
  auto meet = [&](int64_t a, int64_t b) {
    const double pa = a * step, pb = b * step;
    return ((f[b] + pb * pb) - (f[a] + pa * pa)) / (2.0 * (pb - pa));
  };
  int64_t k = -1;
  for (int64_t q = 0; q < n; ++q) {
    if (!std::isfinite(f[q])) continue;
    double s = -kInf;
    while (k >= 0) {
      s = meet(v[k], q);
      if (s > z[k]) break;
      --k;
    }
    ++k;
    v[k] = q;
    z[k] = k == 0 ? -kInf : s;
    z[k + 1] = kInf;
  }
  if (k < 0) {
    std::fill(out, out + n, kInf);
    return;
  }
  int64_t j = 0;
  for (int64_t q = 0; q < n; ++q) {
    const double pq = q * step;
    while (z[j + 1] < pq) ++j;
    const double d = pq - v[j] * step;
    out[q] = d * d + f[v[j]];
  }
}

}  // namespace

double dice(const torch::Tensor& a, const torch::Tensor& b) {
  auto ma = as_mask(a, "dice input"), mb = as_mask(b, "dice input");
  check_same_shape(ma, mb);
  const int64_t na = ma.sum().item<int64_t>(), nb = mb.sum().item<int64_t>();
  if (na == 0 && nb == 0) return 1.0;
  if (na == 0 || nb == 0) return 0.0;
  const int64_t inter = (ma & mb).sum().item<int64_t>();
  return 2.0 * static_cast<double>(inter) / static_cast<double>(na + nb);
}

torch::Tensor surface_voxels(const torch::Tensor& mask) {
  auto m = as_mask(mask, "surface input");
  // Pad with background so border voxels see an outside neighbour.
  auto p = torch::constant_pad_nd(m.to(torch::kUInt8), {1, 1, 1, 1, 1, 1}, 0).to(torch::kBool);
  const int64_t D = m.size(0), H = m.size(1), W = m.size(2);
  auto interior = p.narrow(0, 0, D).narrow(1, 1, H).narrow(2, 1, W) & p.narrow(0, 2, D).narrow(1, 1, H).narrow(2, 1, W) &
                  p.narrow(0, 1, D).narrow(1, 0, H).narrow(2, 1, W) & p.narrow(0, 1, D).narrow(1, 2, H).narrow(2, 1, W) &
                  p.narrow(0, 1, D).narrow(1, 1, H).narrow(2, 0, W) & p.narrow(0, 1, D).narrow(1, 1, H).narrow(2, 2, W);
  return m & ~interior;
}

torch::Tensor distance_to(const torch::Tensor& mask, const Spacing& spacing) {
  auto m = as_mask(mask, "distance input");
  const int64_t dims[3] = {m.size(0), m.size(1), m.size(2)};
  auto dist = torch::where(m, 0.0, kInf).to(torch::kFloat64).contiguous();
  double* g = dist.data_ptr<double>();
  const int64_t strides[3] = {dims[1] * dims[2], dims[2], 1};
  std::vector<double> line, res;
  std::vector<int64_t> v;
  std::vector<double> z;
  for (int axis = 0; axis < 3; ++axis) {
    const int64_t n = dims[axis];
    const int a1 = (axis + 1) % 3, a2 = (axis + 2) % 3;
    line.resize(n);
    res.resize(n);
    for (int64_t i = 0; i < dims[a1]; ++i)
      for (int64_t j = 0; j < dims[a2]; ++j) {
        double* base = g + i * strides[a1] + j * strides[a2];
        for (int64_t q = 0; q < n; ++q) line[q] = base[q * strides[axis]];
        edt_1d(line.data(), res.data(), n, spacing[axis], v, z);
        for (int64_t q = 0; q < n; ++q) base[q * strides[axis]] = res[q];
      }
  }
  return dist.sqrt_();
}

double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw ValidationError("percentile of an empty set");
  std::sort(values.begin(), values.end());
  const double pos = q / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<size_t>(std::floor(pos));
  const size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + (values[hi] - values[lo]) * frac;
}

double hd95(const torch::Tensor& a, const torch::Tensor& b, const Spacing& spacing) {
  auto ma = as_mask(a, "hd95 input"), mb = as_mask(b, "hd95 input");
  check_same_shape(ma, mb);
  if (!(spacing.d > 0 && spacing.h > 0 && spacing.w > 0)) throw ValidationError("hd95 needs positive spacing");
  const bool ea = !ma.any().item<bool>(), eb = !mb.any().item<bool>();
  if (ea && eb) return 0.0;
  if (ea || eb) return kHd95EmptyPenalty;
  auto sa = surface_voxels(ma), sb = surface_voxels(mb);
  auto da = distance_to(sa, spacing), db = distance_to(sb, spacing);
  auto ab = db.masked_select(sa).contiguous(), ba = da.masked_select(sb).contiguous();
  std::vector<double> pooled;
  pooled.reserve(ab.numel() + ba.numel());
  pooled.insert(pooled.end(), ab.data_ptr<double>(), ab.data_ptr<double>() + ab.numel());
  pooled.insert(pooled.end(), ba.data_ptr<double>(), ba.data_ptr<double>() + ba.numel());
  return percentile(std::move(pooled), 95.0);
}

SensSpec sensitivity_specificity(const torch::Tensor& pred, const torch::Tensor& gt) {
  auto p = as_mask(pred, "prediction"), g = as_mask(gt, "ground truth");
  check_same_shape(p, g);
  const int64_t tp = (p & g).sum().item<int64_t>();
  const int64_t fn = (~p & g).sum().item<int64_t>();
  const int64_t fp = (p & ~g).sum().item<int64_t>();
  const int64_t tn = p.numel() - tp - fn - fp;
  SensSpec out;
  if (tp + fn == 0) {
    out.sensitivity = fp == 0 ? 1.0 : 0.0;
  } else {
    out.sensitivity = static_cast<double>(tp) / static_cast<double>(tp + fn);
  }
  // A volume with no negatives has nothing to misclassify as positive.
  out.specificity = tn + fp == 0 ? 1.0 : static_cast<double>(tn) / static_cast<double>(tn + fp);
  return out;
}

void to_json(nlohmann::json& j, const RegionMetrics& m) {
  j = {{"dice", m.dice}, {"hd95", m.hd95}, {"sens", m.sensitivity}, {"spec", m.specificity}};
}

EvalMode parse_eval_mode(const std::string& name) {
  if (name == "regions") return EvalMode::Regions;
  if (name == "labels") return EvalMode::Labels;
  throw ValidationError(fmt::format("unknown evaluation mode '{}' (expected regions or labels)", name));
}

const RegionMetrics& MetricsReport::at(const std::string& name) const {
  for (const auto& [n, m] : regions)
    if (n == name) return m;
  throw ValidationError(fmt::format("report has no region '{}'", name));
}

void to_json(nlohmann::json& j, const MetricsReport& r) {
  j = nlohmann::json::object();
  if (!r.case_id.empty()) j["case_id"] = r.case_id;
  for (const auto& [name, m] : r.regions) j[name] = m;
}

namespace {

RegionMetrics region_metrics(const torch::Tensor& p, const torch::Tensor& g, const Spacing& spacing) {
  RegionMetrics m;
  m.dice = dice(p, g);
  m.hd95 = hd95(p, g, spacing);
  const auto ss = sensitivity_specificity(p, g);
  m.sensitivity = ss.sensitivity;
  m.specificity = ss.specificity;
  return m;
}

}  // namespace

MetricsReport evaluate_case(const LabelVolume& pred, const LabelVolume& gt, const std::string& case_id,
                            EvalMode mode) {
  if (pred.shape() != gt.shape())
    throw ShapeError(fmt::format("prediction shape {} differs from ground truth {}", shape_string(pred.shape()),
                                 shape_string(gt.shape())));
  MetricsReport r{case_id, mode, {}};
  const auto& spacing = gt.spacing();
  if (mode == EvalMode::Regions) {
    const auto p = region_decompose(pred), g = region_decompose(gt);
    r.regions.emplace_back("et", region_metrics(p.et, g.et, spacing));
    r.regions.emplace_back("tc", region_metrics(p.tc, g.tc, spacing));
    r.regions.emplace_back("wt", region_metrics(p.wt, g.wt, spacing));
  } else {
    const auto& p = pred.data();
    const auto& g = gt.data();
    r.regions.emplace_back("ncr", region_metrics(p == 1, g == 1, spacing));
    r.regions.emplace_back("ed", region_metrics(p == 2, g == 2, spacing));
    r.regions.emplace_back("et", region_metrics(p == 4, g == 4, spacing));
  }
  return r;
}

SetReport aggregate(std::vector<MetricsReport> cases) {
  if (cases.empty()) throw ValidationError("evaluation set is empty");
  SetReport out;
  out.mean.case_id = "mean";
  out.mean.mode = cases.front().mode;
  for (const auto& [name, m] : cases.front().regions) out.mean.regions.emplace_back(name, RegionMetrics{});
  for (const auto& c : cases) {
    if (c.mode != out.mean.mode) throw ValidationError("cannot aggregate reports of different modes");
    for (size_t i = 0; i < c.regions.size(); ++i) {
      auto& acc = out.mean.regions[i].second;
      const auto& m = c.regions[i].second;
      acc.dice += m.dice;
      acc.hd95 += m.hd95;
      acc.sensitivity += m.sensitivity;
      acc.specificity += m.specificity;
    }
  }
  const double n = static_cast<double>(cases.size());
  for (auto& [name, acc] : out.mean.regions) {
    acc.dice /= n;
    acc.hd95 /= n;
    acc.sensitivity /= n;
    acc.specificity /= n;
  }
  out.cases = std::move(cases);
  return out;
}

SetReport evaluate_set(const std::vector<EvalPair>& pairs, EvalMode mode) {
  std::vector<MetricsReport> cases;
  cases.reserve(pairs.size());
  for (const auto& p : pairs) cases.push_back(evaluate_case(p.pred, p.gt, p.case_id, mode));
  return aggregate(std::move(cases));
}

nlohmann::json SetReport::to_json() const {
  nlohmann::json j;
  j["mode"] = mean.mode == EvalMode::Regions ? "regions" : "labels";
  j["cases"] = cases;
  auto m = nlohmann::json(mean);
  m.erase("case_id");
  j["mean"] = std::move(m);
  return j;
}

std::string SetReport::to_table() const {
  size_t id_width = 4;
  for (const auto& c : cases) id_width = std::max(id_width, c.case_id.size());
  std::ostringstream os;
  os << fmt::format("{:<{}}", "case", id_width);
  for (const auto& [name, m] : mean.regions) os << fmt::format("  {:>9}", "dice_" + name);
  for (const auto& [name, m] : mean.regions) os << fmt::format("  {:>9}", "hd95_" + name);
  os << '\n';
  auto row = [&](const MetricsReport& r) {
    os << fmt::format("{:<{}}", r.case_id, id_width);
    for (const auto& [name, m] : r.regions) os << fmt::format("  {:>9.5f}", m.dice);
    for (const auto& [name, m] : r.regions) os << fmt::format("  {:>9.4f}", m.hd95);
    os << '\n';
  };
  for (const auto& c : cases) row(c);
  row(mean);
  return os.str();
}

}  // namespace voxseg
