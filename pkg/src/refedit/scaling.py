"""Target-aware adaptive scaling of reference features.

A light conv net looks at the reference and target features side by side and
emits a bounded modulation map alpha in (-1, 1); the reference feature is then
multiplied by (1 + alpha), a factor in (0, 2), so positive alpha amplifies and
negative alpha suppresses. The final conv starts at zero, making the whole
module an exact pass-through before training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .engine import ShapeError, Tensor

__all__ = [
    "ScaleMap",
    "apply_adaptive_scaling",
    "compute_scale_map",
    "init_scaling_params",
    "residual_scale",
]


@dataclass
class ScaleMap:
    """Bounded modulation signal and its derived multiplicative factor."""

    alpha: Tensor  # entries strictly in (-1, 1)
    factor: Tensor  # 1 + alpha, strictly in (0, 2)


def init_scaling_params(channels: int, rng: np.random.Generator, per_channel: bool = True) -> dict[str, Tensor]:
    out_ch = channels if per_channel else 1
    return {
        "c1.w": Tensor(rng.normal(0.0, (2.0 / (2 * channels * 9)) ** 0.5, (channels, 2 * channels, 3, 3)), True),
        "c1.b": Tensor(np.zeros(channels), True),
        "c2.w": Tensor(np.zeros((out_ch, channels, 3, 3)), True),
        "c2.b": Tensor(np.zeros(out_ch), True),
    }


def compute_scale_map(ref_feat: Tensor, tar_feat: Tensor, params, prefix: str = "") -> ScaleMap:
    """alpha = tanh(conv stack over the channel-concatenated pair)."""
    if ref_feat.shape[2:] != tar_feat.shape[2:] or ref_feat.shape[0] != tar_feat.shape[0]:
        raise ShapeError(
            f"scale net needs matching batch and spatial dims, got {ref_feat.shape} vs {tar_feat.shape}"
        )
    h = ops.silu(ops.conv2d(ops.concat_channels(ref_feat, tar_feat), params[prefix + "c1.w"], params[prefix + "c1.b"], padding=1))
    pre = ops.conv2d(h, params[prefix + "c2.w"], params[prefix + "c2.b"], padding=1)
    alpha = ops.tanh_op(pre)
    return ScaleMap(alpha=alpha, factor=ops.add(1.0, alpha))


def residual_scale(ref_feat: Tensor, scale) -> Tensor:
    """Multiply by (1 + alpha); alpha == 0 reproduces the input exactly."""
    if isinstance(scale, ScaleMap):
        factor = scale.factor
    else:
        factor = ops.add(1.0, scale)
    return ops.mul(factor, ref_feat)


def apply_adaptive_scaling(ref_feat: Tensor, tar_feat: Tensor, params, prefix: str = "") -> Tensor:
    return residual_scale(ref_feat, compute_scale_map(ref_feat, tar_feat, params, prefix))
