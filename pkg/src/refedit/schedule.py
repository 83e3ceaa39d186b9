"""Forward-noising schedule: linear variance increments and their cumulative products."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .engine import Tensor, as_tensor

__all__ = ["DiffusionSchedule", "add_noise", "build_schedule"]

DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02


@dataclass
class DiffusionSchedule:
    T: int
    betas: np.ndarray  # per-step variance increments, each in (0, 1)
    alpha_bar: np.ndarray  # cumulative products of (1 - beta), strictly decreasing


def build_schedule(T: int, beta_start: float = DEFAULT_BETA_START, beta_end: float = DEFAULT_BETA_END) -> DiffusionSchedule:
    if T < 1:
        raise ValueError(f"schedule needs at least one step, got T={T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]")
    betas = np.linspace(beta_start, beta_end, T)
    alpha_bar = np.cumprod(1.0 - betas)
    if alpha_bar[0] <= 0.99:
        raise ValueError(f"first cumulative product {alpha_bar[0]} too far from 1; lower beta_start")
    return DiffusionSchedule(T=T, betas=betas, alpha_bar=alpha_bar)


def add_noise(z0: Tensor, eps: Tensor, t, sched: DiffusionSchedule) -> Tensor:
    """Mix signal and noise: sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps.

    ``t`` is an int or an int array (one timestep per batch item).
    """
    z0, eps = as_tensor(z0), as_tensor(eps)
    if z0.shape != eps.shape:
        raise ValueError(f"noise shape {eps.shape} != signal shape {z0.shape}")
    t_arr = np.atleast_1d(np.asarray(t, dtype=np.int64))
    if np.any(t_arr < 0) or np.any(t_arr >= sched.T):
        raise ValueError(f"timestep out of range [0, {sched.T}): {t_arr}")
    abar = sched.alpha_bar[t_arr].reshape((-1,) + (1,) * (z0.ndim - 1))
    return ops.add(ops.mul(z0, np.sqrt(abar)), ops.mul(eps, np.sqrt(1.0 - abar)))
