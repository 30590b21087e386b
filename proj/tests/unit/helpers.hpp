// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>

#include "doctest_torch.hpp"
#include <fmt/format.h>

#include "voxseg/volume.hpp"

namespace testutil {

/// Fresh, empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / fmt::format("voxseg_unit_{}", name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

/// Runs `fn` and returns the message of the exception of type E it throws.
template <class E, class F>
std::string error_of(F&& fn) {
  try {
    fn();
  } catch (const E& e) {
    return e.what();
  }
  FAIL("expected an exception");
  return {};
}

inline torch::Tensor random_labels(int64_t d, int64_t h, int64_t w, uint64_t seed) {
  auto gen = at::detail::createCPUGenerator(seed);
  auto idx = torch::randint(0, 4, {d, h, w}, gen, torch::kInt64);
  return torch::tensor({0, 1, 2, 4}, torch::kUInt8).index({idx});
}

}  // namespace testutil
