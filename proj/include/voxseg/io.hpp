// SPDX-License-Identifier: Apache-2.0
//
// Volume file I/O. Two formats, chosen by extension:
//
//   .v3d          raw test format: "V3D1", uint8 dtype (0=float32, 1=uint8),
//                 uint32 rank, rank x uint32 dims, 3 x float32 spacing,
//                 row-major little-endian payload.
//   .nii/.nii.gz  NIfTI-1 single file. Images are 4D (x, y, z, 4) float32,
//                 labels 3D uint8. NIfTI x/y/z map onto our D/H/W axes.
#pragma once

#include <filesystem>

#include "voxseg/volume.hpp"

namespace voxseg {

enum class VolumeKind { Image, Label };

/// Tensor plus spacing as stored in a file, before any semantic validation.
struct RawVolume {
  torch::Tensor data;
  Spacing spacing;
};

RawVolume read_v3d(const std::filesystem::path& path);
void write_v3d(const std::filesystem::path& path, const torch::Tensor& data, const Spacing& spacing);

RawVolume read_nifti(const std::filesystem::path& path, VolumeKind kind);
void write_nifti(const std::filesystem::path& path, const torch::Tensor& data, const Spacing& spacing, VolumeKind kind);

/// Case id defaults to the file stem (".nii.gz" stripped as a whole).
MultiModalVolume load_image(const std::filesystem::path& path);
LabelVolume load_labels(const std::filesystem::path& path);
ProbabilityVolume load_probabilities(const std::filesystem::path& path);

void save_image(const MultiModalVolume& vol, const std::filesystem::path& path);
void save_label_volume(const LabelVolume& vol, const std::filesystem::path& path);
void save_probabilities(const ProbabilityVolume& vol, const std::filesystem::path& path);

/// "case_001.nii.gz" -> "case_001".
std::string volume_stem(const std::filesystem::path& path);

}  // namespace voxseg
