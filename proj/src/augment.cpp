// SPDX-License-Identifier: Apache-2.0
#include "voxseg/augment.hpp"

#include <cmath>
#include <numbers>

#include <fmt/format.h>

#include "voxseg/error.hpp"

namespace voxseg {

namespace F = torch::nn::functional;

namespace {

double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }
bool coin(Rng& rng, double p) { return std::bernoulli_distribution(p)(rng); }

// 1D Gaussian kernel, radius 3 sigma, normalized to unit sum.
torch::Tensor gaussian_kernel(double sigma) {
  const int64_t radius = std::max<int64_t>(1, static_cast<int64_t>(std::ceil(3 * sigma)));
  auto x = torch::arange(-radius, radius + 1, torch::kFloat32);
  auto k = torch::exp(-(x * x) / (2 * sigma * sigma));
  return k / k.sum();
}

// Separable Gaussian smoothing of a [C, D, H, W] field, zero boundary.
torch::Tensor gaussian_smooth(const torch::Tensor& field, double sigma) {
  auto k = gaussian_kernel(sigma);
  const int64_t n = k.size(0), r = n / 2;
  auto out = field.unsqueeze(1);  // [C,1,D,H,W]
  out = F::conv3d(out, k.view({1, 1, n, 1, 1}), F::Conv3dFuncOptions().padding({r, 0, 0}));
  out = F::conv3d(out, k.view({1, 1, 1, n, 1}), F::Conv3dFuncOptions().padding({0, r, 0}));
  out = F::conv3d(out, k.view({1, 1, 1, 1, n}), F::Conv3dFuncOptions().padding({0, 0, r}));
  return out.squeeze(1);
}

std::array<std::array<double, 3>, 3> matmul(const std::array<std::array<double, 3>, 3>& a,
                                            const std::array<std::array<double, 3>, 3>& b) {
  std::array<std::array<double, 3>, 3> c{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k) c[i][j] += a[i][k] * b[k][j];
  return c;
}

// Rotation about the D, H and W axes in turn.
std::array<std::array<double, 3>, 3> rotation_matrix(const std::array<double, 3>& angles) {
  const double cd = std::cos(angles[0]), sd = std::sin(angles[0]);
  const double ch = std::cos(angles[1]), sh = std::sin(angles[1]);
  const double cw = std::cos(angles[2]), sw = std::sin(angles[2]);
  std::array<std::array<double, 3>, 3> rd{{{1, 0, 0}, {0, cd, -sd}, {0, sd, cd}}};
  std::array<std::array<double, 3>, 3> rh{{{ch, 0, sh}, {0, 1, 0}, {-sh, 0, ch}}};
  std::array<std::array<double, 3>, 3> rw{{{cw, -sw, 0}, {sw, cw, 0}, {0, 0, 1}}};
  return matmul(rw, matmul(rh, rd));
}

}  // namespace

void AugmentConfig::validate() const {
  if (!(intensity_factor > 0 && intensity_factor < 1))
    throw ValidationError(fmt::format("augment.intensity_factor must be in (0, 1), got {}", intensity_factor));
  if (!(scale_range.first < scale_range.second) || scale_range.first <= 0)
    throw ValidationError("augment.scale_range must satisfy 0 < low < high");
  if (!(gamma_range.first < gamma_range.second) || gamma_range.first <= 0)
    throw ValidationError("augment.gamma_range must satisfy 0 < low < high");
  if (!(apply_probability >= 0 && apply_probability <= 1))
    throw ValidationError("augment.apply_probability must be in [0, 1]");
  for (auto c : crop_size)
    if (c < 1) throw ValidationError("augment.crop_size entries must be >= 1");
  if (elastic_sigma <= 0 || elastic_alpha_max < 0) throw ValidationError("augment elastic parameters out of range");
}

MultiModalVolume zscore_normalize(const MultiModalVolume& vol, NormalizeMode mode) {
  auto x = vol.data().to(torch::kFloat64);
  auto out = torch::zeros_like(x);
  torch::Tensor support;
  if (mode == NormalizeMode::Nonzero) {
    support = (x != 0).any(0);
    if (!support.any().item<bool>()) throw ValidationError("zero variance channel: volume has no nonzero voxels");
  }
  for (int64_t c = 0; c < kNumModalities; ++c) {
    auto ch = x[c];
    auto values = mode == NormalizeMode::Whole ? ch.flatten() : ch.masked_select(support);
    const double mean = values.mean().item<double>();
    const double sd = values.std(/*unbiased=*/false).item<double>();
    if (!(sd > 0)) throw ValidationError(fmt::format("zero variance channel {}", c));
    auto normalized = (ch - mean) / sd;
    out[c] = mode == NormalizeMode::Whole ? normalized : torch::where(support, normalized, torch::zeros_like(ch));
  }
  return vol.with_data(out.to(torch::kFloat32));
}

CropResult crop_at(const MultiModalVolume& vol, const LabelVolume& labels, const Shape3& size, const Shape3& start) {
  if (vol.shape() != labels.shape())
    throw ValidationError(fmt::format("image shape {} differs from label shape {}", shape_string(vol.shape()),
                                      shape_string(labels.shape())));
  const auto shape = vol.shape();
  Shape3 before{}, after{};
  for (int a = 0; a < 3; ++a) {
    const int64_t deficit = std::max<int64_t>(0, size[a] - shape[a]);
    before[a] = deficit / 2;
    after[a] = deficit - before[a];
  }
  // F::pad takes pairs from the last axis backwards.
  const std::vector<int64_t> pad{before[2], after[2], before[1], after[1], before[0], after[0]};
  auto img = F::pad(vol.data(), F::PadFuncOptions(pad));
  auto lab = F::pad(labels.data(), F::PadFuncOptions(pad));
  Shape3 origin{};
  for (int a = 0; a < 3; ++a) {
    const int64_t padded = shape[a] + before[a] + after[a];
    if (start[a] < 0 || start[a] + size[a] > padded)
      throw ValidationError(fmt::format("crop start {} out of range on axis {}", start[a], a));
    img = img.narrow(a + 1, start[a], size[a]);
    lab = lab.narrow(a, start[a], size[a]);
    origin[a] = start[a] - before[a];
  }
  return {vol.with_data(img.contiguous()), labels.with_data(lab.contiguous()), origin};
}

CropResult random_crop(const MultiModalVolume& vol, const LabelVolume& labels, const Shape3& size, Rng& rng) {
  const auto shape = vol.shape();
  Shape3 start{};
  for (int a = 0; a < 3; ++a) {
    const int64_t room = std::max<int64_t>(shape[a], size[a]) - size[a];
    start[a] = std::uniform_int_distribution<int64_t>(0, room)(rng);
  }
  return crop_at(vol, labels, size, start);
}

FlipAxes draw_flips(Rng& rng, double p) { return {coin(rng, p), coin(rng, p), coin(rng, p)}; }

std::pair<MultiModalVolume, LabelVolume> apply_flips(const MultiModalVolume& vol, const LabelVolume& labels,
                                                     const FlipAxes& axes) {
  std::vector<int64_t> img_dims, lab_dims;
  for (int a = 0; a < 3; ++a)
    if (axes[a]) {
      img_dims.push_back(a + 1);
      lab_dims.push_back(a);
    }
  if (img_dims.empty()) return {vol, labels};
  return {vol.with_data(vol.data().flip(img_dims)), labels.with_data(labels.data().flip(lab_dims))};
}

std::pair<MultiModalVolume, LabelVolume> random_flip(const MultiModalVolume& vol, const LabelVolume& labels, Rng& rng) {
  return apply_flips(vol, labels, draw_flips(rng));
}

IntensityShift draw_intensity_shift(double factor, Rng& rng) {
  if (!(factor > 0 && factor < 1))
    throw ValidationError(fmt::format("intensity factor must be in (0, 1), got {}", factor));
  IntensityShift p;
  for (int64_t c = 0; c < kNumModalities; ++c) {
    p.scale[c] = static_cast<float>(uniform(rng, 1.0 - factor, 1.0 + factor));
    p.shift[c] = static_cast<float>(uniform(rng, -factor, factor));
  }
  return p;
}

MultiModalVolume apply_intensity_shift(const MultiModalVolume& vol, const IntensityShift& params) {
  auto scale = torch::tensor(std::vector<float>(params.scale.begin(), params.scale.end())).view({4, 1, 1, 1});
  auto shift = torch::tensor(std::vector<float>(params.shift.begin(), params.shift.end())).view({4, 1, 1, 1});
  return vol.with_data(vol.data() * scale + shift);
}

MultiModalVolume random_intensity_shift(const MultiModalVolume& vol, double factor, Rng& rng) {
  return apply_intensity_shift(vol, draw_intensity_shift(factor, rng));
}

NonzeroCrop nonzero_crop(const MultiModalVolume& vol, const LabelVolume& labels) {
  auto support = (vol.data() != 0).any(0);
  if (!support.any().item<bool>()) throw ValidationError("nonzero crop of an all-zero volume");
  BoundingBox box;
  for (int a = 0; a < 3; ++a) {
    std::vector<int64_t> others;
    for (int b = 0; b < 3; ++b)
      if (b != a) others.push_back(b);
    auto hit = support.any(others[1]).any(others[0]).nonzero().flatten();
    box.lo[a] = hit.min().item<int64_t>();
    box.hi[a] = hit.max().item<int64_t>() + 1;
  }
  auto img = vol.data();
  auto lab = labels.data();
  for (int a = 0; a < 3; ++a) {
    img = img.narrow(a + 1, box.lo[a], box.hi[a] - box.lo[a]);
    lab = lab.narrow(a, box.lo[a], box.hi[a] - box.lo[a]);
  }
  return {vol.with_data(img.contiguous()), labels.with_data(lab.contiguous()), box};
}

NnUNetPlan draw_nnunet_plan(const AugmentConfig& cfg, Rng& rng) {
  const double p = cfg.apply_probability;
  NnUNetPlan plan;
  if (cfg.elastic_enabled && coin(rng, p)) {
    plan.elastic = true;
    plan.elastic_alpha = uniform(rng, 0.0, cfg.elastic_alpha_max);
    plan.elastic_seed = rng();
  }
  if (coin(rng, p)) {
    plan.scale = true;
    plan.scale_factor = uniform(rng, cfg.scale_range.first, cfg.scale_range.second);
  }
  if (coin(rng, p)) {
    plan.rotate = true;
    const double max_rad = cfg.rotation_max_degrees * std::numbers::pi / 180.0;
    for (auto& a : plan.angles_rad) a = uniform(rng, -max_rad, max_rad);
  }
  if (coin(rng, p)) {
    plan.gamma = true;
    plan.gamma_value = uniform(rng, cfg.gamma_range.first, cfg.gamma_range.second);
  }
  if (coin(rng, p)) {
    plan.mirror = true;
    plan.mirror_axes = draw_flips(rng);
  }
  return plan;
}

MultiModalVolume apply_gamma(const MultiModalVolume& vol, double gamma) {
  if (gamma == 1.0) return vol;
  auto x = vol.data().to(torch::kFloat64);
  auto out = x.clone();
  for (int64_t c = 0; c < kNumModalities; ++c) {
    const double mn = x[c].min().item<double>();
    const double range = x[c].max().item<double>() - mn;
    if (range <= 0) continue;
    out[c] = torch::pow((x[c] - mn) / range, gamma) * range + mn;
  }
  return vol.with_data(out.to(torch::kFloat32));
}

std::pair<MultiModalVolume, LabelVolume> apply_nnunet_plan(const MultiModalVolume& vol, const LabelVolume& labels,
                                                           const NnUNetPlan& plan, const AugmentConfig& cfg) {
  auto image = vol.data();
  auto lab = labels.data();
  const auto shape = vol.shape();

  if (plan.elastic || plan.scale || plan.rotate) {
    const auto [D, H, W] = shape;
    auto opts = torch::TensorOptions().dtype(torch::kFloat64);
    auto gz = torch::arange(D, opts).view({D, 1, 1}).expand({D, H, W});
    auto gy = torch::arange(H, opts).view({1, H, 1}).expand({D, H, W});
    auto gx = torch::arange(W, opts).view({1, 1, W}).expand({D, H, W});
    std::array<torch::Tensor, 3> rel{gz - (D - 1) / 2.0, gy - (H - 1) / 2.0, gx - (W - 1) / 2.0};

    std::array<std::array<double, 3>, 3> m{{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}};
    if (plan.rotate) m = rotation_matrix(plan.angles_rad);
    const double inv_scale = plan.scale ? 1.0 / plan.scale_factor : 1.0;

    std::array<torch::Tensor, 3> src;
    for (int i = 0; i < 3; ++i) {
      src[i] = (rel[0] * m[i][0] + rel[1] * m[i][1] + rel[2] * m[i][2]) * inv_scale + (shape[i] - 1) / 2.0;
    }
    if (plan.elastic) {
      auto gen = at::make_generator<at::CPUGeneratorImpl>(plan.elastic_seed);
      auto field = torch::rand({3, D, H, W}, gen, torch::kFloat32) * 2 - 1;
      field = gaussian_smooth(field, cfg.elastic_sigma);
      for (int i = 0; i < 3; ++i) {
        const double peak = field[i].abs().max().item<double>();
        if (peak > 0) src[i] = src[i] + field[i].to(torch::kFloat64) * (plan.elastic_alpha / peak);
      }
    }
    // grid_sample wants (x, y, z) = (W, H, D) order in [-1, 1], align_corners.
    auto norm = [&](int i) { return shape[i] > 1 ? src[i] * (2.0 / (shape[i] - 1)) - 1.0 : src[i] * 0.0; };
    auto grid = torch::stack({norm(2), norm(1), norm(0)}, -1).unsqueeze(0).to(torch::kFloat32);

    image = F::grid_sample(image.unsqueeze(0), grid,
                           F::GridSampleFuncOptions().mode(torch::kBilinear).padding_mode(torch::kZeros).align_corners(true))
                .squeeze(0);
    lab = F::grid_sample(lab.to(torch::kFloat32).unsqueeze(0).unsqueeze(0), grid,
                         F::GridSampleFuncOptions().mode(torch::kNearest).padding_mode(torch::kZeros).align_corners(true))
              .squeeze(0)
              .squeeze(0)
              .round()
              .to(torch::kUInt8);
  }

  MultiModalVolume out_img = vol.with_data(image.contiguous());
  LabelVolume out_lab = labels.with_data(lab.contiguous());
  if (plan.gamma) out_img = apply_gamma(out_img, plan.gamma_value);
  if (plan.mirror) return apply_flips(out_img, out_lab, plan.mirror_axes);
  return {out_img, out_lab};
}

std::pair<MultiModalVolume, LabelVolume> nnunet_augment(const MultiModalVolume& vol, const LabelVolume& labels,
                                                        const AugmentConfig& cfg, Rng& rng) {
  if (cfg.regime != Regime::NnUNet) throw ValidationError("nnunet_augment requires augment.regime = nnunet");
  return apply_nnunet_plan(vol, labels, draw_nnunet_plan(cfg, rng), cfg);
}

std::pair<MultiModalVolume, LabelVolume> preprocess_case(const MultiModalVolume& vol, const LabelVolume& labels,
                                                         Regime regime) {
  if (regime == Regime::TransBTS) return {zscore_normalize(vol, NormalizeMode::Whole), labels};
  auto cropped = nonzero_crop(vol, labels);
  return {zscore_normalize(cropped.image, NormalizeMode::Nonzero), cropped.labels};
}

std::pair<MultiModalVolume, LabelVolume> augment_sample(const MultiModalVolume& vol, const LabelVolume& labels,
                                                        const AugmentConfig& cfg, Rng& rng) {
  auto crop = random_crop(vol, labels, cfg.crop_size, rng);
  if (cfg.regime == Regime::TransBTS) {
    auto [img, lab] = random_flip(crop.image, crop.labels, rng);
    return {random_intensity_shift(img, cfg.intensity_factor, rng), lab};
  }
  return nnunet_augment(crop.image, crop.labels, cfg, rng);
}

}  // namespace voxseg
