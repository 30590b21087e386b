// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <utility>

#include "voxseg/volume.hpp"

namespace voxseg {

struct PhantomOptions {
  /// Noise standard deviation as a fraction of the [0, 1] intensity range.
  double noise_sigma = 0.05;
};

inline constexpr int64_t kMinPhantomDim = 32;

/// Synthetic case: a brain ellipsoid holding nested tumour ellipsoids
/// (edema shell > enhancing ring > necrotic core). Each modality gets a
/// label-dependent base intensity plus Gaussian noise; voxels outside the
/// brain are exactly zero. Deterministic in `seed`. Every dim must be >= 32.
std::pair<MultiModalVolume, LabelVolume> generate_phantom(uint64_t seed, const Shape3& shape,
                                                          const PhantomOptions& options = {});

}  // namespace voxseg
