"""Small conv U-Net building blocks shared by both branches.

Topology for ``level_count`` L: in-conv, L x (residual block, stride-2
downsample), mid residual block, then L x (nearest upsample, skip concat,
merge conv, residual block), out-conv. Channel widths double per level.
The target branch additionally receives a sinusoidal timestep embedding
projected into every residual block.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .engine import Tensor

__all__ = [
    "init_resblock",
    "init_unet",
    "resblock",
    "site_names",
    "timestep_embedding",
    "unet_down",
    "unet_in",
    "unet_mid",
    "unet_out",
    "unet_up",
    "unet_widths",
]


def unet_widths(base: int, levels: int) -> list[int]:
    return [base * (2**i) for i in range(levels)]


def site_names(levels: int) -> list[str]:
    """Injection sites, in execution order: the mid block then each up level."""
    return ["mid"] + [f"up{j}" for j in range(levels)]


def timestep_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding of integer timesteps, shape [N, dim]."""
    t_arr = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    args = t_arr[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def _conv_init(rng, c_out, c_in, k, gain=2.0):
    return Tensor(rng.normal(0.0, (gain / (c_in * k * k)) ** 0.5, (c_out, c_in, k, k)), True)


def init_resblock(params: dict, prefix: str, width: int, rng, temb_dim=None) -> None:
    params[prefix + "c1.w"] = _conv_init(rng, width, width, 3)
    params[prefix + "c1.b"] = Tensor(np.zeros(width), True)
    params[prefix + "c2.w"] = _conv_init(rng, width, width, 3, gain=1.0)
    params[prefix + "c2.b"] = Tensor(np.zeros(width), True)
    if temb_dim is not None:
        params[prefix + "t.w"] = Tensor(rng.normal(0.0, temb_dim**-0.5, (temb_dim, width)), True)
        params[prefix + "t.b"] = Tensor(np.zeros(width), True)


def resblock(x: Tensor, params, prefix: str, temb=None) -> Tensor:
    h = ops.conv2d(x, params[prefix + "c1.w"], params[prefix + "c1.b"], padding=1)
    if temb is not None:
        shift = ops.add(ops.matmul(temb, params[prefix + "t.w"]), params[prefix + "t.b"])
        h = ops.add(h, ops.reshape(shift, (x.shape[0], x.shape[1], 1, 1)))
    h = ops.silu(h)
    h = ops.conv2d(h, params[prefix + "c2.w"], params[prefix + "c2.b"], padding=1)
    return ops.add(x, h)


def init_unet(params: dict, prefix: str, in_ch: int, out_ch: int, base: int, levels: int, rng, temb_dim=None) -> None:
    widths = unet_widths(base, levels)
    bottom = widths[-1]
    params[prefix + "in.w"] = _conv_init(rng, widths[0], in_ch, 3)
    params[prefix + "in.b"] = Tensor(np.zeros(widths[0]), True)
    for i in range(levels):
        init_resblock(params, f"{prefix}down{i}.res.", widths[i], rng, temb_dim)
        nxt = widths[min(i + 1, levels - 1)]
        params[f"{prefix}down{i}.ds.w"] = _conv_init(rng, nxt, widths[i], 3)
        params[f"{prefix}down{i}.ds.b"] = Tensor(np.zeros(nxt), True)
    init_resblock(params, prefix + "mid.res.", bottom, rng, temb_dim)
    cur = bottom
    for j, i in enumerate(reversed(range(levels))):
        tgt = widths[i]
        params[f"{prefix}up{j}.us.w"] = _conv_init(rng, tgt, cur, 3)
        params[f"{prefix}up{j}.us.b"] = Tensor(np.zeros(tgt), True)
        params[f"{prefix}up{j}.merge.w"] = _conv_init(rng, tgt, 2 * tgt, 3)
        params[f"{prefix}up{j}.merge.b"] = Tensor(np.zeros(tgt), True)
        init_resblock(params, f"{prefix}up{j}.res.", tgt, rng, temb_dim)
        cur = tgt
    # A small but nonzero out-conv keeps the fresh-init output sensitive to
    # upstream features, which the no-op checks on the add-on modules rely on.
    params[prefix + "out.w"] = Tensor(rng.normal(0.0, 0.1 * (widths[0] * 9) ** -0.5, (out_ch, widths[0], 3, 3)), True)
    params[prefix + "out.b"] = Tensor(np.zeros(out_ch), True)


def unet_in(x: Tensor, params, prefix: str) -> Tensor:
    return ops.conv2d(x, params[prefix + "in.w"], params[prefix + "in.b"], padding=1)


def unet_down(h: Tensor, params, prefix: str, levels: int, temb=None) -> tuple[Tensor, list[Tensor]]:
    """Run the down path; returns the bottom feature and per-level skips."""
    skips = []
    for i in range(levels):
        h = resblock(h, params, f"{prefix}down{i}.res.", temb)
        skips.append(h)
        h = ops.silu(ops.conv2d(h, params[f"{prefix}down{i}.ds.w"], params[f"{prefix}down{i}.ds.b"], stride=2, padding=1))
    return h, skips


def unet_mid(h: Tensor, params, prefix: str, temb=None) -> Tensor:
    return resblock(h, params, prefix + "mid.res.", temb)


def unet_up(h: Tensor, skip: Tensor, params, prefix: str, j: int, temb=None) -> Tensor:
    h = ops.upsample_nearest2(h)
    h = ops.silu(ops.conv2d(h, params[f"{prefix}up{j}.us.w"], params[f"{prefix}up{j}.us.b"], padding=1))
    h = ops.concat_channels(h, skip)
    h = ops.silu(ops.conv2d(h, params[f"{prefix}up{j}.merge.w"], params[f"{prefix}up{j}.merge.b"], padding=1))
    return resblock(h, params, f"{prefix}up{j}.res.", temb)


def unet_out(h: Tensor, params, prefix: str) -> Tensor:
    return ops.conv2d(h, params[prefix + "out.w"], params[prefix + "out.b"], padding=1)
