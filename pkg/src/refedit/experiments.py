"""Experiment drivers: the training loop, sampled evaluation, and ablation lattices.

Every run is pinned by a single seed: dataset generation, parameter init,
batch selection, noise draws and sampling all derive from it, so two runs of
the same spec produce identical metrics and checkpoints.
"""

from __future__ import annotations

import dataclasses
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Optional, Sequence

import numpy as np

from .config import ModelConfig
from .data import EditSample, generate_synthetic, make_batch
from .engine import Tensor, no_grad
from .metrics import masked_psnr, psnr, ssim
from .optim import init_adam_state
from .pipeline import (
    assemble_target_input,
    dual_forward,
    encode_image,
    init_model_params,
    sample,
    save_checkpoint,
    training_step,
)
from .schedule import build_schedule

__all__ = [
    "component_lattice",
    "evaluate_model",
    "format_report",
    "run_ablation",
    "train_loop",
    "training_lattice",
]


def train_loop(
    samples: Sequence[EditSample],
    config: ModelConfig,
    steps: int,
    seed: int,
    out_dir: Optional[str] = None,
    metrics_path: Optional[str] = None,
    params: Optional[dict] = None,
    debug_attention: bool = False,
):
    """Train for ``steps`` optimizer steps; returns (params, per-step losses)."""
    config.validate()
    if params is None:
        params = init_model_params(config, np.random.default_rng(seed))
    sched = build_schedule(config.T)
    opt = init_adam_state(params)
    rng = np.random.default_rng(seed + 1)
    losses: list[float] = []
    sink = open(metrics_path, "w", encoding="utf-8") if metrics_path else None
    debug_sink = None
    if debug_attention and out_dir:
        debug_sink = open(os.path.join(out_dir, "attn_debug.jsonl"), "w", encoding="utf-8")
    try:
        for step in range(steps):
            t0 = time.perf_counter()
            idx = rng.integers(0, len(samples), size=min(config.batch_size, len(samples)))
            inputs, gt = make_batch(samples, idx)
            loss = training_step(inputs, gt, params, opt, sched, config, rng)
            losses.append(loss)
            if sink:
                line = {"step": step, "loss": loss, "wall_ms": (time.perf_counter() - t0) * 1000.0}
                sink.write(json.dumps(line, sort_keys=True) + "\n")
            if debug_sink:
                with no_grad():
                    z_masked = encode_image(Tensor(inputs.target_image * (1 - inputs.mask)), params, config)
                    z = Tensor(np.zeros((gt.shape[0], config.latent_channels, gt.shape[2] // 4, gt.shape[3] // 4)))
                    cond = assemble_target_input(z, inputs.mask, z_masked)
                    debug: list = []
                    dual_forward(z, cond, Tensor(inputs.ref_image), 0, params, config, debug=debug)
                for entry in debug:
                    entry["step"] = step
                    debug_sink.write(json.dumps(entry, sort_keys=True) + "\n")
    finally:
        if sink:
            sink.close()
        if debug_sink:
            debug_sink.close()
    if out_dir:
        save_checkpoint(out_dir, params, config, steps)
    return params, losses


def evaluate_model(samples: Sequence[EditSample], params, config: ModelConfig, seed: int) -> dict:
    """Sample every item (one batched reverse run) and score against ground truth."""
    sched = build_schedule(config.T)
    inputs, gt = make_batch(samples)
    out = sample(inputs.target_image, inputs.mask, inputs.ref_image, params, sched, config, seed)
    per_image = []
    for i in range(out.shape[0]):
        per_image.append(
            {
                "psnr": psnr(out[i], gt[i]),
                "ssim": ssim(out[i], gt[i]),
                "masked_psnr": masked_psnr(out[i], gt[i], inputs.mask[i]),
            }
        )
    aggregate = {key: float(np.mean([row[key] for row in per_image])) for key in per_image[0]}
    return {"per_image": per_image, "aggregate": aggregate}


def component_lattice() -> list[tuple[str, dict]]:
    """The four cumulative component configurations."""
    return [
        ("base", {"enable_sam": False, "enable_paf": False, "enable_arsm": False}),
        ("base+align", {"enable_sam": True, "enable_paf": False, "enable_arsm": False}),
        ("base+align+fuse", {"enable_sam": True, "enable_paf": True, "enable_arsm": False}),
        ("base+align+fuse+scale", {"enable_sam": True, "enable_paf": True, "enable_arsm": True}),
    ]


def training_lattice() -> list[tuple[str, dict]]:
    """The six freeze combinations (ref / target / adapter trainable patterns)."""
    rows = []
    for ref_on, tar_on, ada_on in [
        (True, True, True),
        (True, True, False),
        (True, False, False),
        (True, False, True),
        (False, True, True),
        (False, True, False),
    ]:
        name = f"train_{'R' if ref_on else '-'}{'T' if tar_on else '-'}{'I' if ada_on else '-'}"
        rows.append((name, {"freeze_ref": not ref_on, "freeze_tar": not tar_on, "freeze_adapter": not ada_on}))
    return rows


def _run_row(name, overrides, base_config, train_samples, eval_samples, steps, seed, out_dir):
    config = dataclasses.replace(base_config, **overrides)
    row_dir = os.path.join(out_dir, "rows", name) if out_dir else None
    if row_dir:
        os.makedirs(row_dir, exist_ok=True)
    metrics_path = os.path.join(row_dir, "metrics.jsonl") if row_dir else None
    params, losses = train_loop(train_samples, config, steps, seed, out_dir=row_dir, metrics_path=metrics_path)
    scores = evaluate_model(eval_samples, params, config, seed + 7)
    return {
        "name": name,
        "flags": overrides,
        "final_loss": losses[-1] if losses else None,
        **scores["aggregate"],
    }


def run_ablation(
    base_config: ModelConfig,
    lattice: str,
    task: str,
    size: int,
    n_train: int,
    n_eval: int,
    steps: int,
    seed: int,
    out_dir: Optional[str] = None,
    threads: int = 1,
) -> dict:
    """Train every lattice row on the same data and seed; score a held-out split."""
    if lattice == "components":
        rows = component_lattice()
    elif lattice == "training":
        rows = training_lattice()
    else:
        raise ValueError(f"unknown lattice {lattice!r}; expected 'components' or 'training'")
    train_samples = generate_synthetic(task, n_train, size, seed + 17)
    eval_samples = generate_synthetic(task, n_eval, size, seed + 29)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)

    def job(row):
        name, overrides = row
        return _run_row(name, overrides, base_config, train_samples, eval_samples, steps, seed, out_dir)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(job, rows))
    else:
        results = [job(row) for row in rows]
    report = {
        "lattice": lattice,
        "task": task,
        "size": size,
        "steps": steps,
        "seed": seed,
        "rows": results,
    }
    if out_dir:
        with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
        with open(os.path.join(out_dir, "report.txt"), "w", encoding="utf-8") as fh:
            fh.write(format_report(report))
    return report


def format_report(report: dict) -> str:
    """Aligned text table of the ablation rows."""
    header = f"{'row':<26} {'psnr':>8} {'ssim':>8} {'masked_psnr':>12} {'final_loss':>11}"
    lines = [f"lattice={report['lattice']} task={report['task']} steps={report['steps']} seed={report['seed']}", header, "-" * len(header)]
    for row in report["rows"]:
        loss = f"{row['final_loss']:.4f}" if row["final_loss"] is not None else "n/a"
        lines.append(
            f"{row['name']:<26} {row['psnr']:>8.2f} {row['ssim']:>8.4f} {row['masked_psnr']:>12.2f} {loss:>11}"
        )
    return "\n".join(lines) + "\n"
