"""Finite-difference verification of every differentiable operation.

Each case builds a deterministic scalar loss, computes reverse-mode gradients
once, then compares against central differences (f(x+h) - f(x-h)) / 2h taken
element by element. An element passes when the absolute difference is below
the floor or the relative error is below the tolerance.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import ops
from .alignment import apply_spatial_alignment, bilinear_sample, generate_grid, init_alignment_params, predict_affine
from .config import ModelConfig
from .engine import GradTape, Tensor, backward, no_grad
from .fusion import AttentionBlockParams, attn
from .pipeline import assemble_target_input, decode_latent, dual_forward, encode_image, init_model_params, mse
from .scaling import apply_adaptive_scaling, init_scaling_params
from .schedule import add_noise, build_schedule

__all__ = ["CheckResult", "check_elements", "check_gradients", "run_suite", "suite_passed"]

DEFAULT_H = 1e-5
OP_RTOL = 1e-4
END_TO_END_RTOL = 1e-3
ABS_FLOOR = 1e-8


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    max_abs_err: float
    passed: bool

    def line(self) -> str:
        status = "ok  " if self.passed else "FAIL"
        return f"[{status}] {self.name:<34} max_rel={self.max_rel_err:.3e} max_abs={self.max_abs_err:.3e}"


def _compare(analytic: np.ndarray, numeric: np.ndarray, rtol: float, floor: float) -> tuple[float, float, bool]:
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    ok = (diff < floor) | (diff <= rtol * scale)
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(scale > 0, diff / np.maximum(scale, floor), 0.0)
    return float(rel.max(initial=0.0)), float(diff.max(initial=0.0)), bool(ok.all())


def _loss_value(build_loss: Callable[[], Tensor]) -> float:
    with no_grad():
        return float(build_loss().data)


def check_gradients(
    name: str,
    build_loss: Callable[[], Tensor],
    leaves: Sequence[Tensor],
    h: float = DEFAULT_H,
    rtol: float = OP_RTOL,
    floor: float = ABS_FLOOR,
) -> CheckResult:
    """Full-tensor check: finite-difference every element of every leaf."""
    for leaf in leaves:
        leaf.grad = None
    with GradTape():
        backward(build_loss())
    worst_rel, worst_abs, all_ok = 0.0, 0.0, True
    for leaf in leaves:
        analytic = np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad.copy()
        numeric = np.zeros_like(leaf.data)
        flat = leaf.data.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            above = _loss_value(build_loss)
            flat[i] = keep - h
            below = _loss_value(build_loss)
            flat[i] = keep
            num_flat[i] = (above - below) / (2.0 * h)
        rel, abs_, ok = _compare(analytic, numeric, rtol, floor)
        worst_rel, worst_abs, all_ok = max(worst_rel, rel), max(worst_abs, abs_), all_ok and ok
    return CheckResult(name, worst_rel, worst_abs, all_ok)


def check_elements(
    name: str,
    build_loss: Callable[[], Tensor],
    picks: Sequence[tuple[Tensor, int]],
    h: float = DEFAULT_H,
    rtol: float = END_TO_END_RTOL,
    floor: float = ABS_FLOOR,
) -> CheckResult:
    """Spot check: finite-difference only the chosen (tensor, flat index) entries."""
    for t, _ in picks:
        t.grad = None
    with GradTape():
        backward(build_loss())
    analytic, numeric = [], []
    for t, idx in picks:
        grad = t.grad if t.grad is not None else np.zeros_like(t.data)
        analytic.append(grad.reshape(-1)[idx])
        flat = t.data.reshape(-1)
        keep = flat[idx]
        flat[idx] = keep + h
        above = _loss_value(build_loss)
        flat[idx] = keep - h
        below = _loss_value(build_loss)
        flat[idx] = keep
        numeric.append((above - below) / (2.0 * h))
    rel, abs_, ok = _compare(np.asarray(analytic), np.asarray(numeric), rtol, floor)
    return CheckResult(name, rel, abs_, ok)


def _rand(rng, shape, lo=-1.0, hi=1.0, track=True) -> Tensor:
    return Tensor(rng.uniform(lo, hi, shape), requires_grad=track)


def _weighted(out: Tensor, rng) -> Tensor:
    """Scalar loss with a fixed random weighting, so adjoints are non-uniform."""
    w = Tensor(rng.uniform(-1.0, 1.0, out.shape))
    return ops.sum(ops.mul(out, w))


def _op_cases(rng) -> list[tuple[str, Callable[[], Tensor], list[Tensor]]]:
    cases = []

    a = _rand(rng, (3, 4))
    b = _rand(rng, (4, 2))
    w1 = rng.uniform(-1, 1, (3, 2))
    cases.append(("matmul", lambda: ops.sum(ops.mul(ops.matmul(a, b), Tensor(w1))), [a, b]))

    ab = _rand(rng, (2, 2, 3, 4))
    bb = _rand(rng, (4, 5))
    w2 = rng.uniform(-1, 1, (2, 2, 3, 5))
    cases.append(("matmul_batched", lambda: ops.sum(ops.mul(ops.matmul(ab, bb), Tensor(w2))), [ab, bb]))

    e1 = _rand(rng, (2, 1, 3))
    e2 = _rand(rng, (4, 1))
    w3 = rng.uniform(-1, 1, (2, 4, 3))
    cases.append(("mul_broadcast", lambda: ops.sum(ops.mul(ops.mul(e1, e2), Tensor(w3))), [e1, e2]))
    cases.append(("add_sub_broadcast", lambda: ops.sum(ops.mul(ops.sub(ops.add(e1, e2), ops.mul(e1, 0.5)), Tensor(w3))), [e1, e2]))

    s1 = _rand(rng, (3, 4, 5))
    w4 = rng.uniform(-1, 1, (3, 5))
    cases.append(("sum_axis", lambda: ops.sum(ops.mul(ops.sum(s1, axis=1), Tensor(w4))), [s1]))
    cases.append(("mean_axes", lambda: ops.mul(ops.mean(ops.mul(s1, s1)), 3.0), [s1]))

    t1 = _rand(rng, (2, 5), lo=-2.0, hi=2.0)
    w5 = rng.uniform(-1, 1, (2, 5))
    cases.append(("tanh", lambda: ops.sum(ops.mul(ops.tanh_op(t1), Tensor(w5))), [t1]))
    cases.append(("sigmoid", lambda: ops.sum(ops.mul(ops.sigmoid(t1), Tensor(w5))), [t1]))
    cases.append(("silu", lambda: ops.sum(ops.mul(ops.silu(t1), Tensor(w5))), [t1]))

    sm = _rand(rng, (3, 6), lo=-3.0, hi=3.0)
    w6 = rng.uniform(-1, 1, (3, 6))
    cases.append(("softmax_last_axis", lambda: ops.sum(ops.mul(ops.softmax_last_axis(sm), Tensor(w6))), [sm]))

    c1 = _rand(rng, (2, 2, 3, 3))
    c2 = _rand(rng, (2, 3, 3, 3))
    w7 = rng.uniform(-1, 1, (2, 5, 3, 3))
    cases.append(("concat_channels", lambda: ops.sum(ops.mul(ops.concat_channels(c1, c2), Tensor(w7))), [c1, c2]))

    sl = _rand(rng, (2, 6, 3))
    w8 = rng.uniform(-1, 1, (2, 2, 3))
    cases.append(("slice_axis", lambda: ops.sum(ops.mul(ops.slice_axis(sl, 1, 2, 2), Tensor(w8))), [sl]))

    rs = _rand(rng, (2, 3, 4))
    w9 = rng.uniform(-1, 1, (4, 6))
    cases.append(
        ("reshape_transpose", lambda: ops.sum(ops.mul(ops.reshape(ops.transpose(rs, (2, 0, 1)), (4, 6)), Tensor(w9))), [rs])
    )

    cx = _rand(rng, (2, 3, 5, 5))
    cw = _rand(rng, (4, 3, 3, 3), lo=-0.5, hi=0.5)
    cb = _rand(rng, (4,), lo=-0.5, hi=0.5)
    w10 = rng.uniform(-1, 1, (2, 4, 3, 3))
    cases.append(("conv2d_stride2_pad1", lambda: ops.sum(ops.mul(ops.conv2d(cx, cw, cb, stride=2, padding=1), Tensor(w10))), [cx, cw, cb]))

    ux = _rand(rng, (1, 2, 3, 3))
    w11 = rng.uniform(-1, 1, (1, 2, 6, 6))
    cases.append(("upsample_nearest2", lambda: ops.sum(ops.mul(ops.upsample_nearest2(ux), Tensor(w11))), [ux]))

    src = _rand(rng, (1, 2, 5, 5))
    grid = Tensor(rng.uniform(-0.85, 0.85, (1, 4, 4, 2)), requires_grad=True)
    w12 = rng.uniform(-1, 1, (1, 2, 4, 4))
    cases.append(("bilinear_sample", lambda: ops.sum(ops.mul(bilinear_sample(src, grid), Tensor(w12))), [src, grid]))

    q = _rand(rng, (2, 3, 8))
    kv = _rand(rng, (2, 5, 8))
    ap = AttentionBlockParams(
        wq=_rand(rng, (8, 8), lo=-0.5, hi=0.5),
        wk=_rand(rng, (8, 8), lo=-0.5, hi=0.5),
        wv=_rand(rng, (8, 8), lo=-0.5, hi=0.5),
        wo=_rand(rng, (8, 8), lo=-0.5, hi=0.5),
        head_count=2,
        head_dim=4,
    )
    w13 = rng.uniform(-1, 1, (2, 3, 8))
    cases.append(("attention", lambda: ops.sum(ops.mul(attn(q, kv, ap), Tensor(w13))), [q, kv, ap.wq, ap.wk, ap.wv, ap.wo]))

    sc_params = {k: v for k, v in init_scaling_params(3, np.random.default_rng(7)).items()}
    for v in sc_params.values():
        v.data += rng.normal(0.0, 0.1, v.shape)  # move the zero-init off its stationary point
    fr = _rand(rng, (1, 3, 4, 4))
    ft = _rand(rng, (1, 3, 4, 4))
    w14 = rng.uniform(-1, 1, (1, 3, 4, 4))
    cases.append(
        (
            "adaptive_scaling",
            lambda: ops.sum(ops.mul(apply_adaptive_scaling(fr, ft, sc_params), Tensor(w14))),
            [fr, ft] + list(sc_params.values()),
        )
    )

    al_params = init_alignment_params(2, np.random.default_rng(9))
    for v in al_params.values():
        v.data += rng.normal(0.0, 0.05, v.shape)  # generic warp, away from exact pixel centers
    af = _rand(rng, (1, 2, 5, 5))
    w15 = rng.uniform(-1, 1, (1, 2, 5, 5))
    cases.append(
        (
            "spatial_alignment",
            lambda: ops.sum(ops.mul(apply_spatial_alignment(af, al_params), Tensor(w15))),
            [af] + list(al_params.values()),
        )
    )
    return cases


def _end_to_end_cases(seed: int) -> list[tuple[str, Callable[[], Tensor], list[tuple[Tensor, int]]]]:
    rng = np.random.default_rng(seed + 1)
    config = ModelConfig(latent_channels=2, base_width=8, level_count=2, T=8, batch_size=1, seed=seed)
    params = init_model_params(config, np.random.default_rng(seed + 2))
    for p in params.values():
        p.data += rng.normal(0.0, 0.05, p.shape)  # open every gate so all paths carry gradient

    sched = build_schedule(config.T)
    size = 16
    gt = Tensor(rng.uniform(0.1, 0.9, (1, 3, size, size)))
    tar = rng.uniform(0.1, 0.9, (1, 3, size, size))
    mask = np.zeros((1, 1, size, size))
    mask[:, :, 4:12, 4:12] = 1.0
    ref = Tensor(rng.uniform(0.1, 0.9, (1, 3, size, size)))
    eps = Tensor(rng.standard_normal((1, config.latent_channels, size // 4, size // 4)))
    t_fixed = np.array([3])
    masked = Tensor(tar * (1.0 - mask))

    def build_loss():
        z0 = encode_image(gt, params, config)
        recon = decode_latent(z0, params, config)
        z_t = add_noise(z0, eps, t_fixed, sched)
        cond = assemble_target_input(z_t, mask, encode_image(masked, params, config))
        eps_hat = dual_forward(z_t, cond, ref, t_fixed, params, config)
        return ops.add(mse(eps_hat, eps), mse(recon, gt))

    groups = {
        "alignment": "sam.",
        "scaling": "arsm.",
        "fusion": "paf.",
        "unet_ref": "unet_ref.",
        "unet_tar": "unet_tar.",
        "encoder": "vae.",
        "adapter": "adapter.",
    }
    cases = []
    for label, prefix in groups.items():
        names = sorted(n for n in params if n.startswith(prefix))
        picks = []
        for _ in range(5):
            name = names[int(rng.integers(0, len(names)))]
            tensor = params[name]
            picks.append((tensor, int(rng.integers(0, tensor.size))))
        cases.append((f"pipeline_{label}", build_loss, picks))
    return cases


def run_suite(seed: int = 0) -> list[CheckResult]:
    """All per-op checks plus end-to-end parameter spot checks."""
    rng = np.random.default_rng(seed)
    results = [check_gradients(name, fn, leaves) for name, fn, leaves in _op_cases(rng)]
    for name, fn, picks in _end_to_end_cases(seed):
        results.append(check_elements(name, fn, picks))
    return results


def suite_passed(results: Sequence[CheckResult]) -> bool:
    return all(r.passed for r in results)
