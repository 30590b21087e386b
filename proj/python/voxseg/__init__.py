# SPDX-License-Identifier: Apache-2.0
"""Brain-tumor segmentation toolkit: phantoms, label cleanup, fusion and metrics."""

import torch  # noqa: F401  (loads libtorch before the extension)

from ._voxseg import (
    HD95_EMPTY_PENALTY,
    IoError,
    ShapeError,
    ValidationError,
    axis_anchors,
    connected_components,
    dice,
    ensemble_average,
    ensemble_labels,
    et_replacement,
    evaluate_case,
    generate_phantom,
    hd95,
    remove_small_components,
    tta_member_count,
)

__all__ = [
    "HD95_EMPTY_PENALTY",
    "IoError",
    "ShapeError",
    "ValidationError",
    "axis_anchors",
    "connected_components",
    "dice",
    "ensemble_average",
    "ensemble_labels",
    "et_replacement",
    "evaluate_case",
    "generate_phantom",
    "hd95",
    "remove_small_components",
    "tta_member_count",
]
