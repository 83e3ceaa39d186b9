"""Learned affine canonicalization of feature maps.

A small localization net predicts a per-item 2x3 affine transform; a grid
generator turns it into per-pixel source coordinates; a bilinear sampler
differentiably warps the map. Coordinates are normalized to [-1, 1] with
pixel centers at (2*i + 1)/size - 1 (pixel-center, "align corners false"
convention), and samples falling outside the unit square read zeros.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .engine import ShapeError, Tensor, accumulate, grad_enabled, record

__all__ = [
    "AffineParams",
    "SamplingGrid",
    "apply_spatial_alignment",
    "bilinear_sample",
    "generate_grid",
    "init_alignment_params",
    "invert_theta",
    "predict_affine",
]

IDENTITY_THETA = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])
_LOC_HIDDEN = 16


@dataclass
class AffineParams:
    """Per-item affine transform, rows [a, b, tx, c, d, ty] acting on
    normalized coordinates: src = [[a, b, tx], [c, d, ty]] @ [x, y, 1]."""

    theta: Tensor

    def __post_init__(self):
        if self.theta.ndim != 2 or self.theta.shape[1] != 6:
            raise ShapeError(f"affine parameters must be [N, 6], got {self.theta.shape}")

    @staticmethod
    def identity(n: int) -> "AffineParams":
        return AffineParams(Tensor(np.tile(IDENTITY_THETA, (n, 1))))


@dataclass
class SamplingGrid:
    """Normalized source coordinates per output pixel, shape [N, H, W, 2] in (x, y) order."""

    coords: Tensor

    def __post_init__(self):
        if self.coords.ndim != 4 or self.coords.shape[3] != 2:
            raise ShapeError(f"sampling grid must be [N, H, W, 2], got {self.coords.shape}")


def init_alignment_params(in_channels: int, rng: np.random.Generator) -> dict[str, Tensor]:
    """Localization net parameters: two stride-2 convs, pooled, one affine layer.

    The final layer starts at zero weight with identity bias, so the module
    begins as an exact no-op.
    """
    h = _LOC_HIDDEN
    params = {
        "loc.c1.w": Tensor(rng.normal(0.0, (2.0 / (in_channels * 9)) ** 0.5, (h, in_channels, 3, 3)), True),
        "loc.c1.b": Tensor(np.zeros(h), True),
        "loc.c2.w": Tensor(rng.normal(0.0, (2.0 / (h * 9)) ** 0.5, (h, h, 3, 3)), True),
        "loc.c2.b": Tensor(np.zeros(h), True),
        "loc.fc.w": Tensor(np.zeros((h, 6)), True),
        "loc.fc.b": Tensor(IDENTITY_THETA.copy(), True),
    }
    return params


def predict_affine(feat: Tensor, params, prefix: str = "") -> AffineParams:
    """Run the localization net on an NCHW map; one transform per item."""
    if feat.ndim != 4:
        raise ShapeError(f"predict_affine needs an NCHW map, got {feat.shape}")
    if feat.shape[2] < 4 or feat.shape[3] < 4:
        raise ShapeError(f"localization net needs at least 4x4 spatial input, got {feat.shape}")
    h = ops.silu(ops.conv2d(feat, params[prefix + "loc.c1.w"], params[prefix + "loc.c1.b"], stride=2, padding=1))
    h = ops.silu(ops.conv2d(h, params[prefix + "loc.c2.w"], params[prefix + "loc.c2.b"], stride=2, padding=1))
    pooled = ops.mean(h, axis=(2, 3))
    theta = ops.add(ops.matmul(pooled, params[prefix + "loc.fc.w"]), params[prefix + "loc.fc.b"])
    return AffineParams(theta)


def _centers(n: int) -> np.ndarray:
    return (2.0 * np.arange(n) + 1.0) / n - 1.0


def generate_grid(params: AffineParams, out_h: int, out_w: int) -> SamplingGrid:
    """Map each output pixel center through the affine transform."""
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"grid size must be positive, got {out_h}x{out_w}")
    theta = params.theta if isinstance(params, AffineParams) else params
    n = theta.shape[0]
    xs, ys = np.meshgrid(_centers(out_w), _centers(out_h))
    base = np.stack([xs, ys, np.ones_like(xs)], axis=-1).reshape(1, out_h * out_w, 3)
    mats = ops.transpose(ops.reshape(theta, (n, 2, 3)), (0, 2, 1))  # [N, 3, 2]
    coords = ops.matmul(Tensor(base), mats)  # [N, H*W, 2]
    return SamplingGrid(ops.reshape(coords, (n, out_h, out_w, 2)))


def bilinear_sample(src: Tensor, grid) -> Tensor:
    """Sample an NCHW map at grid coordinates with bilinear weights.

    Out-of-range corners contribute zero; gradients flow to both the source
    values and the grid coordinates.
    """
    g = grid.coords if isinstance(grid, SamplingGrid) else grid
    src = src if isinstance(src, Tensor) else Tensor(src)
    if src.ndim != 4:
        raise ShapeError(f"bilinear_sample needs an NCHW source, got {src.shape}")
    if g.ndim != 4 or g.shape[3] != 2 or g.shape[0] != src.shape[0]:
        raise ShapeError(f"grid {g.shape} does not match source batch {src.shape}")
    n, c, h, w = src.shape
    _, ho, wo, _ = g.shape

    ix = (g.data[..., 0] + 1.0) * (w / 2.0) - 0.5
    iy = (g.data[..., 1] + 1.0) * (h / 2.0) - 0.5
    x0f = np.floor(ix)
    y0f = np.floor(iy)
    fx = ix - x0f
    fy = iy - y0f
    x0 = x0f.astype(np.int64)
    y0 = y0f.astype(np.int64)

    batch = np.broadcast_to(np.arange(n).reshape(n, 1, 1), (n, ho, wo))

    def gather(yi, xi):
        valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        vals = src.data[batch, :, np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]  # [N, Ho, Wo, C]
        return vals * valid[..., None], valid

    v00, m00 = gather(y0, x0)
    v01, m01 = gather(y0, x0 + 1)
    v10, m10 = gather(y0 + 1, x0)
    v11, m11 = gather(y0 + 1, x0 + 1)
    w00 = ((1 - fx) * (1 - fy))[..., None]
    w01 = (fx * (1 - fy))[..., None]
    w10 = ((1 - fx) * fy)[..., None]
    w11 = (fx * fy)[..., None]
    out_data = (v00 * w00 + v01 * w01 + v10 * w10 + v11 * w11).transpose(0, 3, 1, 2)

    grid_tensor = g
    track = grad_enabled() and (src.requires_grad or grid_tensor.requires_grad)
    out = Tensor(out_data, requires_grad=track)
    if track:

        def apply():
            go = out.grad
            if go is None:
                return
            gt = go.transpose(0, 2, 3, 1)  # [N, Ho, Wo, C]
            if src.requires_grad:
                dsrc = np.zeros((n, h, w, c))
                for yi, xi, wgt, msk in (
                    (y0, x0, w00, m00),
                    (y0, x0 + 1, w01, m01),
                    (y0 + 1, x0, w10, m10),
                    (y0 + 1, x0 + 1, w11, m11),
                ):
                    np.add.at(
                        dsrc,
                        (batch, np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)),
                        gt * wgt * msk[..., None],
                    )
                accumulate(src, dsrc.transpose(0, 3, 1, 2))
            if grid_tensor.requires_grad:
                dix = ((v01 - v00) * (1 - fy)[..., None] + (v11 - v10) * fy[..., None]) * gt
                diy = ((v10 - v00) * (1 - fx)[..., None] + (v11 - v01) * fx[..., None]) * gt
                dg = np.stack([dix.sum(-1) * (w / 2.0), diy.sum(-1) * (h / 2.0)], axis=-1)
                accumulate(grid_tensor, dg)

        record("bilinear_sample", apply, out)
    return out


def apply_spatial_alignment(feat: Tensor, params, prefix: str = "") -> Tensor:
    """Predict, grid, sample: warp ``feat`` into its canonical pose."""
    theta = predict_affine(feat, params, prefix)
    grid = generate_grid(theta, feat.shape[2], feat.shape[3])
    return bilinear_sample(feat, grid)


def invert_theta(theta: np.ndarray) -> np.ndarray:
    """Exact inverse of [N, 6] affine rows (plain numpy, for tests/tools)."""
    theta = np.asarray(theta, dtype=np.float64).reshape(-1, 6)
    out = np.empty_like(theta)
    for i, row in enumerate(theta):
        m = np.array([[row[0], row[1], row[2]], [row[3], row[4], row[5]], [0.0, 0.0, 1.0]])
        inv = np.linalg.inv(m)
        out[i] = [inv[0, 0], inv[0, 1], inv[0, 2], inv[1, 0], inv[1, 1], inv[1, 2]]
    return out
