"""Three-branch attention fusion of reference appearance into target features.

The structural branch self-attends over the target sequence, the synergistic
branch self-attends over the concatenated target+reference sequence (keeping
the target half), and the appearance branch cross-attends from the target into
the concatenated sequence. The branch outputs are mixed by three learnable
scalars; with the mix at (1, 0, 0) and a zero-initialized structural output
projection the fused update starts at exactly zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import ops
from .engine import ShapeError, Tensor

__all__ = [
    "AttentionBlockParams",
    "FusionWeights",
    "appearance_attention",
    "attn",
    "attention_params",
    "fusion_weights",
    "init_fusion_params",
    "map_from_seq",
    "paf_fuse",
    "seq_from_map",
    "structural_attention",
    "synergistic_attention",
]

DEFAULT_HEAD_COUNT = 4
BRANCHES = ("stru", "syn", "app")


@dataclass
class AttentionBlockParams:
    """Projections for one attention branch; width = head_count * head_dim."""

    wq: Tensor  # [D_q, width]
    wk: Tensor  # [D_kv, width]
    wv: Tensor  # [D_kv, width]
    wo: Tensor  # [width, width]
    head_count: int
    head_dim: int

    def __post_init__(self):
        if self.head_count * self.head_dim != self.wq.shape[1]:
            raise ShapeError(
                f"head_count {self.head_count} x head_dim {self.head_dim} != width {self.wq.shape[1]}"
            )


@dataclass
class FusionWeights:
    """The three learnable scalar mix weights (unconstrained)."""

    beta: Tensor
    gamma: Tensor
    lam: Tensor


def init_fusion_params(width: int, rng: np.random.Generator, head_count: int = DEFAULT_HEAD_COUNT) -> dict[str, Tensor]:
    if width % head_count:
        raise ShapeError(f"width {width} not divisible by head count {head_count}")
    scale = width**-0.5
    params: dict[str, Tensor] = {}
    for branch in BRANCHES:
        for proj in ("q", "k", "v"):
            params[f"{branch}.{proj}.w"] = Tensor(rng.normal(0.0, scale, (width, width)), True)
        if branch == "stru":
            # Gated at init only through the mix weights below; the structural
            # branch carries mix weight 1, so its output projection starts at 0.
            params["stru.o.w"] = Tensor(np.zeros((width, width)), True)
        else:
            params[f"{branch}.o.w"] = Tensor(rng.normal(0.0, scale, (width, width)), True)
    params["beta"] = Tensor(1.0, True)
    params["gamma"] = Tensor(0.0, True)
    params["lambda"] = Tensor(0.0, True)
    return params


def attention_params(params, prefix: str, branch: str, head_count: int = DEFAULT_HEAD_COUNT) -> AttentionBlockParams:
    wq = params[f"{prefix}{branch}.q.w"]
    width = wq.shape[1]
    return AttentionBlockParams(
        wq=wq,
        wk=params[f"{prefix}{branch}.k.w"],
        wv=params[f"{prefix}{branch}.v.w"],
        wo=params[f"{prefix}{branch}.o.w"],
        head_count=head_count,
        head_dim=width // head_count,
    )


def fusion_weights(params, prefix: str) -> FusionWeights:
    return FusionWeights(beta=params[prefix + "beta"], gamma=params[prefix + "gamma"], lam=params[prefix + "lambda"])


def attn(q_src: Tensor, kv_src: Tensor, p: AttentionBlockParams, weights_out: Optional[list] = None) -> Tensor:
    """Scaled dot-product attention over sequences, multi-head, output-projected.

    ``weights_out``, when given, receives the [N, heads, L_q, L_kv] softmax
    weight array (a plain copy, for inspection).
    """
    if q_src.ndim != 3 or kv_src.ndim != 3:
        raise ShapeError(f"attention needs [N, L, D] sequences, got {q_src.shape} and {kv_src.shape}")
    if q_src.shape[2] != p.wq.shape[0]:
        raise ShapeError(f"query width {q_src.shape[2]} != projection input {p.wq.shape[0]}")
    if kv_src.shape[2] != p.wk.shape[0]:
        raise ShapeError(f"key/value width {kv_src.shape[2]} != projection input {p.wk.shape[0]}")
    n, lq, _ = q_src.shape
    lkv = kv_src.shape[1]
    hc, hd = p.head_count, p.head_dim

    def split_heads(x, length):
        return ops.transpose(ops.reshape(x, (n, length, hc, hd)), (0, 2, 1, 3))

    q = split_heads(ops.matmul(q_src, p.wq), lq)
    k = split_heads(ops.matmul(kv_src, p.wk), lkv)
    v = split_heads(ops.matmul(kv_src, p.wv), lkv)
    scores = ops.mul(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
    w = ops.softmax_last_axis(scores)
    if weights_out is not None:
        weights_out.append(w.data.copy())
    mixed = ops.matmul(w, v)
    merged = ops.reshape(ops.transpose(mixed, (0, 2, 1, 3)), (n, lq, hc * hd))
    return ops.matmul(merged, p.wo)


def structural_attention(tar_seq: Tensor, p: AttentionBlockParams, weights_out=None) -> Tensor:
    """Self-attention over the target sequence only."""
    return attn(tar_seq, tar_seq, p, weights_out)


def synergistic_attention(tar_seq: Tensor, ref_seq: Tensor, p: AttentionBlockParams, weights_out=None) -> Tensor:
    """Self-attention over [target; reference]; returns the target half."""
    if tar_seq.shape != ref_seq.shape:
        raise ShapeError(f"sequences must match, got {tar_seq.shape} vs {ref_seq.shape}")
    length = tar_seq.shape[1]
    cat = ops.concat([tar_seq, ref_seq], axis=1)
    return ops.slice_axis(attn(cat, cat, p, weights_out), 1, 0, length)


def appearance_attention(tar_seq: Tensor, cat_seq: Tensor, p: AttentionBlockParams, weights_out=None) -> Tensor:
    """Cross-attention: target queries read from the concatenated sequence."""
    return attn(tar_seq, cat_seq, p, weights_out)


def seq_from_map(x: Tensor) -> Tensor:
    """[N, C, H, W] -> [N, H*W, C], row-major over pixels."""
    n, c, h, w = x.shape
    return ops.reshape(ops.transpose(x, (0, 2, 3, 1)), (n, h * w, c))


def map_from_seq(x: Tensor, hw: tuple[int, int]) -> Tensor:
    n, _, c = x.shape
    h, w = hw
    return ops.transpose(ops.reshape(x, (n, h, w, c)), (0, 3, 1, 2))


def _weight_summary(name: str, arrays: list) -> dict:
    w = arrays[0]
    sums = w.sum(axis=-1)
    entropy = -(w * np.log(np.maximum(w, 1e-300))).sum(axis=-1)
    return {
        "branch": name,
        "row_sum_min": float(sums.min()),
        "row_sum_max": float(sums.max()),
        "entropy": float(entropy.mean()),
    }


def paf_fuse(
    tar_map: Tensor,
    ref_map: Tensor,
    params,
    prefix: str = "",
    head_count: int = DEFAULT_HEAD_COUNT,
    debug: Optional[list] = None,
    weights: Optional[FusionWeights] = None,
) -> Tensor:
    """Mix the three branch outputs by the learnable scalars; NCHW in and out.

    ``debug``, when given, receives one summary dict per branch (softmax row
    sums and mean entropy).
    """
    if tar_map.shape != ref_map.shape:
        raise ShapeError(f"fusion needs matching maps, got {tar_map.shape} vs {ref_map.shape}")
    hw = (tar_map.shape[2], tar_map.shape[3])
    tar_seq = seq_from_map(tar_map)
    ref_seq = seq_from_map(ref_map)
    cat_seq = ops.concat([tar_seq, ref_seq], axis=1)
    w = weights if weights is not None else fusion_weights(params, prefix)

    collect = ([], [], []) if debug is not None else (None, None, None)
    a_stru = structural_attention(tar_seq, attention_params(params, prefix, "stru", head_count), collect[0])
    a_syn = synergistic_attention(tar_seq, ref_seq, attention_params(params, prefix, "syn", head_count), collect[1])
    a_app = appearance_attention(tar_seq, cat_seq, attention_params(params, prefix, "app", head_count), collect[2])
    if debug is not None:
        for name, arrays in zip(BRANCHES, collect):
            debug.append(_weight_summary(name, arrays))

    fused = ops.add(ops.add(ops.mul(w.beta, a_stru), ops.mul(w.gamma, a_syn)), ops.mul(w.lam, a_app))
    return map_from_seq(fused, hw)
