"""Reconstruction metrics: peak signal-to-noise ratio and structural similarity.

Evaluation-only code: plain numpy, no gradient tracking. RGB inputs are
converted to grayscale by channel mean before SSIM.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["MetricReport", "PSNR_CAP_DB", "evaluate_pairs", "masked_psnr", "psnr", "ssim"]

PSNR_CAP_DB = 99.0  # returned for identical inputs (zero error)


def _as_array(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def psnr(a, b, max_val: float = 1.0) -> float:
    """10 * log10(max_val^2 / MSE), capped at 99 dB for identical inputs."""
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shapes differ: {a.shape} vs {b.shape}")
    err = float(np.mean((a - b) ** 2))
    if err == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(max_val**2 / err), PSNR_CAP_DB)


def masked_psnr(a, b, mask, max_val: float = 1.0) -> float:
    """PSNR restricted to pixels where the (broadcastable) mask is nonzero."""
    a, b, m = _as_array(a), _as_array(b), _as_array(mask)
    if a.shape != b.shape:
        raise ValueError(f"masked_psnr: shapes differ: {a.shape} vs {b.shape}")
    m = np.broadcast_to(m != 0.0, a.shape)
    if not m.any():
        raise ValueError("masked_psnr: mask selects no pixels")
    err = float(np.mean((a[m] - b[m]) ** 2))
    if err == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(max_val**2 / err), PSNR_CAP_DB)


def _to_gray(img: np.ndarray) -> np.ndarray:
    if img.ndim == 2:
        return img
    if img.ndim == 3:
        return img.mean(axis=0)
    raise ValueError(f"ssim expects [H, W] or [C, H, W], got {img.shape}")


def _gaussian_kernel(window: int, sigma: float) -> np.ndarray:
    r = np.arange(window) - (window - 1) / 2.0
    k = np.exp(-(r**2) / (2.0 * sigma**2))
    k2 = np.outer(k, k)
    return k2 / k2.sum()


def ssim(a, b, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03, max_val: float = 1.0) -> float:
    """Mean of the local similarity map over Gaussian-weighted valid windows."""
    ga, gb = _to_gray(_as_array(a)), _to_gray(_as_array(b))
    if ga.shape != gb.shape:
        raise ValueError(f"ssim: shapes differ: {ga.shape} vs {gb.shape}")
    if ga.shape[0] < window or ga.shape[1] < window:
        raise ValueError(f"ssim: image {ga.shape} smaller than window {window}")
    kern = _gaussian_kernel(window, sigma)
    wa = np.lib.stride_tricks.sliding_window_view(ga, (window, window))
    wb = np.lib.stride_tricks.sliding_window_view(gb, (window, window))
    mu_a = (wa * kern).sum(axis=(-1, -2))
    mu_b = (wb * kern).sum(axis=(-1, -2))
    var_a = (wa**2 * kern).sum(axis=(-1, -2)) - mu_a**2
    var_b = (wb**2 * kern).sum(axis=(-1, -2)) - mu_b**2
    cov = (wa * wb * kern).sum(axis=(-1, -2)) - mu_a * mu_b
    c1 = (k1 * max_val) ** 2
    c2 = (k2 * max_val) ** 2
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass
class MetricReport:
    """Per-image values plus their means over the evaluated set."""

    psnr_db: list[float]
    ssim: list[float]

    @property
    def psnr_mean(self) -> float:
        return float(np.mean(self.psnr_db))

    @property
    def ssim_mean(self) -> float:
        return float(np.mean(self.ssim))


def evaluate_pairs(pairs) -> MetricReport:
    """Compute both metrics for an iterable of ([C,H,W], [C,H,W]) image pairs."""
    psnrs, ssims = [], []
    for a, b in pairs:
        psnrs.append(psnr(a, b))
        ssims.append(ssim(a, b))
    return MetricReport(psnr_db=psnrs, ssim=ssims)
