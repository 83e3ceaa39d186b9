"""Synthetic editing tasks and dataset files.

Three task kinds, each isolating one module of the pipeline:

* ``copy-patch``: the masked target region must be filled with the reference
  texture (spatial fusion).
* ``recolor``: the masked region keeps the target texture but takes per-channel
  gains derived from the reference's color (channel-wise modulation).
* ``translate``: the reference shows the object shifted by up to a quarter of
  the image width; the ground truth renders it in canonical centered pose
  (alignment).

Each sample is (reference, target, mask, ground truth) with images in [0, 1]
and a strictly binary mask; the ground truth differs from the target only
inside the mask. Samples are stored one per file in the portable tensor dump
format under the names ref/tar/mask/gt.
"""

from __future__ import annotations

import glob
import json
import os
from dataclasses import dataclass

import numpy as np

from .checkpoint import load_tensors, save_tensors
from .pipeline import EditingInputs

__all__ = ["EditSample", "TASKS", "generate_synthetic", "load_dataset", "make_batch", "make_sample"]

TASKS = ("copy-patch", "recolor", "translate")


@dataclass
class EditSample:
    ref: np.ndarray  # [3, H, W]
    tar: np.ndarray  # [3, H, W]
    mask: np.ndarray  # [1, H, W]
    gt: np.ndarray  # [3, H, W]


def _smooth_texture(rng: np.random.Generator, size: int, cells: int = 4) -> np.ndarray:
    """Low-frequency random field: bilinear interpolation of a coarse grid."""
    grid = rng.uniform(0.0, 1.0, (3, cells + 1, cells + 1))
    pos = np.linspace(0.0, cells, size)
    i0 = np.clip(pos.astype(np.int64), 0, cells - 1)
    frac = pos - i0
    rows = grid[:, i0, :] * (1.0 - frac)[None, :, None] + grid[:, i0 + 1, :] * frac[None, :, None]
    out = rows[:, :, i0] * (1.0 - frac)[None, None, :] + rows[:, :, i0 + 1] * frac[None, None, :]
    return out


def _blob(size: int, center: tuple[float, float], radius: float) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size]
    r2 = (xs - center[0]) ** 2 + (ys - center[1]) ** 2
    return np.exp(-r2 / (2.0 * radius**2))


def _centered_box_mask(size: int) -> np.ndarray:
    mask = np.zeros((1, size, size))
    a = size // 4
    mask[:, a : size - a, a : size - a] = 1.0
    return mask


def sample_translate_offset(rng: np.random.Generator, size: int) -> tuple[int, int]:
    """Reference object offset; spans +-25% of the image width."""
    lim = size // 4
    return int(rng.integers(-lim, lim + 1)), int(rng.integers(-lim, lim + 1))


def make_sample(task: str, rng: np.random.Generator, size: int) -> EditSample:
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    tar = _smooth_texture(rng, size)
    if task == "copy-patch":
        ref = _smooth_texture(rng, size, cells=6)
        side_y = int(rng.integers(size // 4, size // 2 + 1))
        side_x = int(rng.integers(size // 4, size // 2 + 1))
        y0 = int(rng.integers(0, size - side_y + 1))
        x0 = int(rng.integers(0, size - side_x + 1))
        mask = np.zeros((1, size, size))
        mask[:, y0 : y0 + side_y, x0 : x0 + side_x] = 1.0
        gt = tar * (1.0 - mask) + ref * mask
    elif task == "recolor":
        color = rng.uniform(0.0, 1.0, 3)
        ref = np.broadcast_to(color[:, None, None], (3, size, size)).copy()
        mask = _centered_box_mask(size)
        gains = (0.5 + 1.5 * color)[:, None, None]
        gt = tar * (1.0 - mask) + np.clip(tar * gains, 0.0, 1.0) * mask
    else:  # translate
        color = rng.uniform(0.3, 1.0, 3)
        dx, dy = sample_translate_offset(rng, size)
        center = (size / 2.0, size / 2.0)
        bg = _smooth_texture(rng, size) * 0.3
        alpha_ref = _blob(size, (center[0] + dx, center[1] + dy), size / 8.0)
        ref = bg * (1.0 - alpha_ref) + color[:, None, None] * alpha_ref
        mask = _centered_box_mask(size)
        alpha_canon = _blob(size, center, size / 8.0)
        canon = tar * (1.0 - alpha_canon) + color[:, None, None] * alpha_canon
        gt = tar * (1.0 - mask) + canon * mask
    return EditSample(
        ref=np.clip(ref, 0.0, 1.0),
        tar=np.clip(tar, 0.0, 1.0),
        mask=mask,
        gt=np.clip(gt, 0.0, 1.0),
    )


def generate_synthetic(task: str, n: int, size: int, seed: int, out_dir=None) -> list[EditSample]:
    """Deterministically generate ``n`` samples; optionally write them to disk."""
    if size % 4:
        raise ValueError(f"image size must be divisible by 4, got {size}")
    if size < 8:
        raise ValueError(f"image size too small: {size}")
    rng = np.random.default_rng(seed)
    samples = [make_sample(task, rng, size) for _ in range(n)]
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        for i, s in enumerate(samples):
            save_tensors(
                os.path.join(out_dir, f"sample_{i:05d}.tns"),
                {"ref": s.ref, "tar": s.tar, "mask": s.mask, "gt": s.gt},
            )
        manifest = {"task": task, "n": n, "size": size, "seed": seed}
        with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return samples


def load_dataset(path) -> list[EditSample]:
    files = sorted(glob.glob(os.path.join(path, "sample_*.tns")))
    if not files:
        raise FileNotFoundError(f"no sample_*.tns files under {path}")
    out = []
    for f in files:
        arrays = load_tensors(f)
        out.append(EditSample(ref=arrays["ref"], tar=arrays["tar"], mask=arrays["mask"], gt=arrays["gt"]))
    return out


def make_batch(samples, indices=None) -> tuple[EditingInputs, np.ndarray]:
    """Stack samples into batch arrays; returns (inputs, ground truth)."""
    chosen = samples if indices is None else [samples[i] for i in indices]
    inputs = EditingInputs(
        ref_image=np.stack([s.ref for s in chosen]),
        target_image=np.stack([s.tar for s in chosen]),
        mask=np.stack([s.mask for s in chosen]),
    )
    gt = np.stack([s.gt for s in chosen])
    return inputs, gt
