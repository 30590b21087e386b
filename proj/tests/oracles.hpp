// SPDX-License-Identifier: Apache-2.0
//
// Straight-line reference implementations used to check the library.
// Deliberately naive: plain loops over std::vector, no torch kernels.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <random>
#include <vector>

#include <torch/torch.h>

namespace oracle {

struct Grid {
  int64_t d = 0, h = 0, w = 0;
  int64_t index(int64_t z, int64_t y, int64_t x) const { return (z * h + y) * w + x; }
  bool inside(int64_t z, int64_t y, int64_t x) const { return z >= 0 && y >= 0 && x >= 0 && z < d && y < h && x < w; }
  int64_t size() const { return d * h * w; }
};

inline std::vector<uint8_t> to_vec(const torch::Tensor& mask) {
  auto m = mask.to(torch::kUInt8).contiguous();
  return {m.data_ptr<uint8_t>(), m.data_ptr<uint8_t>() + m.numel()};
}

inline Grid grid_of(const torch::Tensor& t) { return {t.size(-3), t.size(-2), t.size(-1)}; }

/// Recursive flood fill labeling; ids in raster order of first voxel.
inline std::vector<int32_t> flood_fill_labels(const std::vector<uint8_t>& mask, const Grid& g, int connectivity) {
  std::vector<int32_t> labels(mask.size(), 0);
  std::function<void(int64_t, int64_t, int64_t, int32_t)> fill = [&](int64_t z, int64_t y, int64_t x, int32_t id) {
    labels[g.index(z, y, x)] = id;
    for (int dz = -1; dz <= 1; ++dz)
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const int n = std::abs(dz) + std::abs(dy) + std::abs(dx);
          if (n == 0 || (connectivity == 6 && n != 1)) continue;
          const int64_t zz = z + dz, yy = y + dy, xx = x + dx;
          if (!g.inside(zz, yy, xx)) continue;
          const auto j = g.index(zz, yy, xx);
          if (mask[j] && labels[j] == 0) fill(zz, yy, xx, id);
        }
  };
  int32_t next = 0;
  for (int64_t z = 0; z < g.d; ++z)
    for (int64_t y = 0; y < g.h; ++y)
      for (int64_t x = 0; x < g.w; ++x)
        if (mask[g.index(z, y, x)] && labels[g.index(z, y, x)] == 0) fill(z, y, x, ++next);
  return labels;
}

/// True when both labelings induce the same partition (a bijection between ids).
inline bool same_partition(const std::vector<int32_t>& a, const std::vector<int32_t>& b) {
  if (a.size() != b.size()) return false;
  std::map<int32_t, int32_t> ab, ba;
  for (size_t i = 0; i < a.size(); ++i) {
    if ((a[i] == 0) != (b[i] == 0)) return false;
    if (a[i] == 0) continue;
    auto [it1, new1] = ab.emplace(a[i], b[i]);
    auto [it2, new2] = ba.emplace(b[i], a[i]);
    if (it1->second != b[i] || it2->second != a[i]) return false;
  }
  return true;
}

inline double dice(const std::vector<uint8_t>& a, const std::vector<uint8_t>& b) {
  int64_t na = 0, nb = 0, both = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    na += a[i] != 0;
    nb += b[i] != 0;
    both += (a[i] != 0) && (b[i] != 0);
  }
  if (na == 0 && nb == 0) return 1.0;
  if (na == 0 || nb == 0) return 0.0;
  return 2.0 * both / static_cast<double>(na + nb);
}

/// Voxels of the mask with a face neighbour outside the mask or outside the grid.
inline std::vector<std::array<int64_t, 3>> surface(const std::vector<uint8_t>& m, const Grid& g) {
  std::vector<std::array<int64_t, 3>> out;
  static const int off[6][3] = {{-1, 0, 0}, {1, 0, 0}, {0, -1, 0}, {0, 1, 0}, {0, 0, -1}, {0, 0, 1}};
  for (int64_t z = 0; z < g.d; ++z)
    for (int64_t y = 0; y < g.h; ++y)
      for (int64_t x = 0; x < g.w; ++x) {
        if (!m[g.index(z, y, x)]) continue;
        bool edge = false;
        for (const auto& o : off) {
          const int64_t zz = z + o[0], yy = y + o[1], xx = x + o[2];
          if (!g.inside(zz, yy, xx) || !m[g.index(zz, yy, xx)]) edge = true;
        }
        if (edge) out.push_back({z, y, x});
      }
  return out;
}

inline double percentile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double rank = q / 100.0 * (v.size() - 1);
  const size_t below = static_cast<size_t>(rank);
  if (below + 1 >= v.size()) return v.back();
  return v[below] + (rank - below) * (v[below + 1] - v[below]);
}

/// Exhaustive pairwise surface distances, pooled both ways.
inline double hd95(const std::vector<uint8_t>& a, const std::vector<uint8_t>& b, const Grid& g,
                   std::array<double, 3> spacing = {1, 1, 1}) {
  int64_t na = 0, nb = 0;
  for (size_t i = 0; i < a.size(); ++i) na += a[i] != 0, nb += b[i] != 0;
  if (na == 0 && nb == 0) return 0.0;
  if (na == 0 || nb == 0) return 373.1287;
  const auto sa = surface(a, g), sb = surface(b, g);
  auto nearest = [&](const std::array<int64_t, 3>& p, const std::vector<std::array<int64_t, 3>>& set) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& q : set) {
      double s = 0;
      for (int k = 0; k < 3; ++k) {
        const double d = (p[k] - q[k]) * spacing[k];
        s += d * d;
      }
      best = std::min(best, std::sqrt(s));
    }
    return best;
  };
  std::vector<double> pooled;
  for (const auto& p : sa) pooled.push_back(nearest(p, sb));
  for (const auto& p : sb) pooled.push_back(nearest(p, sa));
  return percentile(pooled, 95.0);
}

/// Largest pairwise surface-to-surface nearest distance (directed Hausdorff, both ways).
inline double hausdorff_max(const std::vector<uint8_t>& a, const std::vector<uint8_t>& b, const Grid& g) {
  const auto sa = surface(a, g), sb = surface(b, g);
  double worst = 0;
  for (int pass = 0; pass < 2; ++pass) {
    const auto& from = pass == 0 ? sa : sb;
    const auto& to = pass == 0 ? sb : sa;
    for (const auto& p : from) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& q : to) {
        double s = 0;
        for (int k = 0; k < 3; ++k) s += double(p[k] - q[k]) * double(p[k] - q[k]);
        best = std::min(best, std::sqrt(s));
      }
      worst = std::max(worst, best);
    }
  }
  return worst;
}

/// Per voxel, value of the last patch (in list order) covering it.
inline torch::Tensor sequential_overwrite(const std::vector<std::array<int64_t, 3>>& starts,
                                          const std::vector<torch::Tensor>& patches, std::array<int64_t, 3> shape) {
  const int64_t C = patches.front().size(0);
  const int64_t P0 = patches.front().size(1), P1 = patches.front().size(2), P2 = patches.front().size(3);
  auto out = torch::zeros({C, shape[0], shape[1], shape[2]});
  auto* o = out.data_ptr<float>();
  std::vector<torch::Tensor> dense;
  for (const auto& p : patches) dense.push_back(p.contiguous());
  const int64_t plane = shape[0] * shape[1] * shape[2];
  for (int64_t z = 0; z < shape[0]; ++z)
    for (int64_t y = 0; y < shape[1]; ++y)
      for (int64_t x = 0; x < shape[2]; ++x) {
        int64_t last = -1;
        for (size_t i = 0; i < starts.size(); ++i) {
          const auto& s = starts[i];
          if (z >= s[0] && z < s[0] + P0 && y >= s[1] && y < s[1] + P1 && x >= s[2] && x < s[2] + P2) last = i;
        }
        if (last < 0) continue;
        const auto& s = starts[last];
        const float* src = dense[last].data_ptr<float>();
        for (int64_t c = 0; c < C; ++c)
          o[c * plane + (z * shape[1] + y) * shape[2] + x] =
              src[((c * P0 + (z - s[0])) * P1 + (y - s[1])) * P2 + (x - s[2])];
      }
  return out;
}

/// Random binary mask with roughly `density` foreground.
inline torch::Tensor random_mask(std::mt19937_64& rng, int64_t d, int64_t h, int64_t w, double density) {
  std::bernoulli_distribution coin(density);
  auto t = torch::zeros({d, h, w}, torch::kBool);
  auto* p = t.data_ptr<bool>();
  for (int64_t i = 0; i < t.numel(); ++i) p[i] = coin(rng);
  return t;
}

}  // namespace oracle
