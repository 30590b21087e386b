// SPDX-License-Identifier: Apache-2.0
//
// doctest after the torch headers: c10 logging also defines CHECK.
#pragma once

#include <torch/torch.h>

#undef CHECK
#include <doctest.h>
