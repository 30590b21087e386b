// SPDX-License-Identifier: Apache-2.0
#include "voxseg/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include <fmt/format.h>

#include "voxseg/error.hpp"

namespace voxseg {

namespace {

// Base intensity per modality (FLAIR, T1, T1ce, T2) and tissue class
// (healthy brain, NCR, ED, ET).
constexpr float kBaseIntensity[4][4] = {
    {0.30f, 0.55f, 0.85f, 0.65f},
    {0.50f, 0.20f, 0.40f, 0.35f},
    {0.40f, 0.25f, 0.45f, 0.95f},
    {0.35f, 0.90f, 0.80f, 0.60f},
};

struct Ellipsoid {
  std::array<double, 3> center;
  std::array<double, 3> radii;

  bool contains(int64_t z, int64_t y, int64_t x) const {
    const double dz = (z - center[0]) / radii[0];
    const double dy = (y - center[1]) / radii[1];
    const double dx = (x - center[2]) / radii[2];
    return dz * dz + dy * dy + dx * dx <= 1.0;
  }
};

}  // namespace

std::pair<MultiModalVolume, LabelVolume> generate_phantom(uint64_t seed, const Shape3& shape,
                                                          const PhantomOptions& options) {
  for (int a = 0; a < 3; ++a)
    if (shape[a] < kMinPhantomDim)
      throw ValidationError(fmt::format("phantom shape {} too small to fit nested ellipsoids (each dim must be >= {})",
                                        shape_string(shape), kMinPhantomDim));
  if (!(options.noise_sigma >= 0)) throw ValidationError("phantom noise sigma must be >= 0");

  std::mt19937_64 rng(seed);
  auto uniform = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };

  Ellipsoid brain{}, outer{}, middle{}, inner{};
  for (int a = 0; a < 3; ++a) {
    const double dim = static_cast<double>(shape[a]);
    brain.center[a] = (dim - 1) / 2.0;
    brain.radii[a] = 0.46 * dim;
    const double r = std::max(uniform(0.12, 0.2) * dim, 6.0);
    outer.radii[a] = r;
    middle.radii[a] = r * uniform(0.6, 0.7);
    inner.radii[a] = middle.radii[a] * uniform(0.45, 0.55);
    // Integer centres keep the core voxel inside all three shells.
    const double lo = r + 1, hi = dim - r - 2;
    const double c = std::round(std::clamp(brain.center[a] + uniform(-0.12, 0.12) * dim, lo, hi));
    outer.center[a] = middle.center[a] = inner.center[a] = c;
  }

  const auto [D, H, W] = shape;
  auto labels = torch::zeros({D, H, W}, torch::kUInt8);
  auto image = torch::zeros({kNumModalities, D, H, W}, torch::kFloat32);
  auto lab = labels.accessor<uint8_t, 3>();
  auto img = image.accessor<float, 4>();
  std::normal_distribution<float> noise(0.0f, static_cast<float>(options.noise_sigma));

  for (int64_t z = 0; z < D; ++z)
    for (int64_t y = 0; y < H; ++y)
      for (int64_t x = 0; x < W; ++x) {
        const bool in_tumor = outer.contains(z, y, x);
        if (!in_tumor && !brain.contains(z, y, x)) continue;
        int cls = 0;
        uint8_t value = 0;
        if (inner.contains(z, y, x)) {
          cls = 1, value = 1;
        } else if (middle.contains(z, y, x)) {
          cls = 3, value = 4;
        } else if (in_tumor) {
          cls = 2, value = 2;
        }
        lab[z][y][x] = value;
        for (int c = 0; c < kNumModalities; ++c) {
          // Keep brain voxels nonzero so the zero background stays distinguishable.
          const float v = kBaseIntensity[c][cls] + noise(rng);
          img[c][z][y][x] = v == 0.0f ? 1e-6f : v;
        }
      }

  LabelVolume label_volume(labels);
  for (Label l : {Label::Necrosis, Label::Edema, Label::Enhancing})
    if (label_volume.count(l) == 0)
      throw ValidationError(fmt::format("phantom shape {} too small: label {} vanished", shape_string(shape),
                                        static_cast<int>(l)));
  return {MultiModalVolume(image, {}, fmt::format("phantom_{:06d}", seed)), label_volume};
}

}  // namespace voxseg
