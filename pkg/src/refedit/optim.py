"""Adam with bias correction, plus the named parameter groups and freeze logic."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional

import numpy as np

from .config import ModelConfig
from .engine import Tensor

__all__ = ["AdamState", "adam_update", "frozen_param_names", "init_adam_state", "parameter_groups"]

GROUP_PREFIXES = {
    "ref": ("unet_ref.",),
    "tar": ("unet_tar.",),
    "adapter": ("adapter.",),
    "alignment": ("sam.",),
    "scaling": ("arsm.",),
    "fusion": ("paf.",),
    "vae": ("vae.",),
}


@dataclass
class AdamState:
    """First/second moment buffers (shaped like their parameters) and step count."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_adam_state(params: Mapping[str, Tensor], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    return AdamState(
        m={name: np.zeros_like(p.data) for name, p in params.items()},
        v={name: np.zeros_like(p.data) for name, p in params.items()},
        beta1=beta1,
        beta2=beta2,
        eps=eps,
    )


def adam_update(
    params: Mapping[str, Tensor],
    grads: Mapping[str, Optional[np.ndarray]],
    state: AdamState,
    lr: float,
    frozen: Iterable[str] = (),
) -> Mapping[str, Tensor]:
    """One Adam step in place. Frozen names and absent gradients are skipped."""
    frozen = set(frozen)
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        if name in frozen:
            continue
        g = grads.get(name)
        if g is None:
            continue
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


def parameter_groups(params: Mapping[str, Tensor]) -> dict[str, list[str]]:
    """Bucket parameter names by component prefix."""
    groups: dict[str, list[str]] = {name: [] for name in GROUP_PREFIXES}
    for name in params:
        for group, prefixes in GROUP_PREFIXES.items():
            if name.startswith(prefixes):
                groups[group].append(name)
                break
        else:
            raise KeyError(f"parameter {name} matches no known group")
    return groups


def frozen_param_names(params: Mapping[str, Tensor], config: ModelConfig) -> set[str]:
    prefixes = []
    if config.freeze_ref:
        prefixes.append("unet_ref.")
    if config.freeze_tar:
        prefixes.append("unet_tar.")
    if config.freeze_adapter:
        prefixes.append("adapter.")
    return {name for name in params if name.startswith(tuple(prefixes))} if prefixes else set()
