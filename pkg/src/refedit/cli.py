"""Command-line entry points for experiments.

Subcommands: gradcheck, gen-data, train, eval, sample, ablate, metrics.
Every subcommand validates its configuration before touching the filesystem.
The GENIE_THREADS environment variable caps parallel ablation rows.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .checkpoint import load_tensors, save_tensors
from .config import ConfigError, ExperimentSpec, ModelConfig, load_config
from .data import TASKS, generate_synthetic, load_dataset, make_batch
from .experiments import evaluate_model, run_ablation, train_loop
from .gradcheck import run_suite, suite_passed
from .metrics import psnr, ssim
from .pipeline import load_checkpoint, sample
from .pnm import read_pnm, write_pnm
from .schedule import build_schedule

__all__ = ["build_parser", "main"]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="refedit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, config=True):
        if config:
            p.add_argument("--config", help="flat key=value config file (defaults used when omitted)")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="optional path for the JSON report")

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    p.add_argument("--task", choices=TASKS, default="copy-patch")
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train on a dataset directory or fresh synthetic data")
    add_common(p)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--data", help="dataset directory from gen-data (otherwise synthetic in-memory)")
    p.add_argument("--task", choices=TASKS, default="copy-patch")
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--debug-attention", action="store_true", help="emit fusion attention summaries as JSON lines")

    p = sub.add_parser("eval", help="sample a checkpoint over a dataset and score it")
    p.add_argument("--checkpoint", required=True, help="checkpoint directory from train")
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="optional output directory for eval.json")

    p = sub.add_parser("sample", help="run the reverse process and write edited images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("ablate", help="train and score a lattice of configurations")
    add_common(p)
    p.add_argument("--lattice", choices=("components", "training"), default="components")
    p.add_argument("--steps", type=int, default=150)
    p.add_argument("--task", choices=TASKS, default="copy-patch")
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--n-eval", type=int, default=8)
    p.add_argument("--size", type=int, default=16)

    p = sub.add_parser("metrics", help="score two directories of images against each other")
    p.add_argument("--dir-a", required=True)
    p.add_argument("--dir-b", required=True)
    p.add_argument("--out", help="optional path for the JSON report")
    return parser


def _load_config(path) -> ModelConfig:
    if path is None:
        return ModelConfig().validate()
    return load_config(path)


def _cmd_gradcheck(args) -> int:
    results = run_suite(args.seed)
    for r in results:
        print(r.line())
    ok = suite_passed(results)
    print(f"gradcheck: {'all passed' if ok else 'FAILURES'} ({len(results)} checks)")
    if args.out:
        payload = [
            {"name": r.name, "max_rel_err": r.max_rel_err, "max_abs_err": r.max_abs_err, "passed": r.passed}
            for r in results
        ]
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return 0 if ok else 1


def _cmd_gen_data(args) -> int:
    generate_synthetic(args.task, args.n, args.size, args.seed, out_dir=args.out)
    print(f"wrote {args.n} {args.task} samples of size {args.size} to {args.out}")
    return 0


def _cmd_train(args) -> int:
    spec = ExperimentSpec(
        config=_load_config(args.config),
        out_dir=args.out or "",
        seed=args.seed,
        task=args.task,
        sample_count=args.n,
        image_size=args.size,
        steps=args.steps,
    )
    if args.data:
        samples = load_dataset(args.data)
    else:
        samples = generate_synthetic(spec.task, spec.sample_count, spec.image_size, spec.seed + 17)
    metrics_path = None
    if spec.out_dir:
        os.makedirs(spec.out_dir, exist_ok=True)
        metrics_path = os.path.join(spec.out_dir, "metrics.jsonl")
    _, losses = train_loop(
        samples,
        spec.config,
        spec.steps,
        spec.seed,
        out_dir=spec.out_dir or None,
        metrics_path=metrics_path,
        debug_attention=args.debug_attention,
    )
    print(f"trained {spec.steps} steps; first loss {losses[0]:.4f}, last loss {losses[-1]:.4f}")
    return 0


def _cmd_eval(args) -> int:
    params, config, _ = load_checkpoint(args.checkpoint)
    samples = load_dataset(args.data)
    report = evaluate_model(samples, params, config, args.seed)
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "eval.json"), "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    print(text)
    return 0


def _cmd_sample(args) -> int:
    params, config, _ = load_checkpoint(args.checkpoint)
    samples = load_dataset(args.data)[: args.count]
    inputs, _ = make_batch(samples)
    sched = build_schedule(config.T)
    out = sample(inputs.target_image, inputs.mask, inputs.ref_image, params, sched, config, args.seed)
    os.makedirs(args.out, exist_ok=True)
    for i in range(out.shape[0]):
        save_tensors(os.path.join(args.out, f"edited_{i:04d}.tns"), {"image": out[i]})
        write_pnm(os.path.join(args.out, f"edited_{i:04d}.ppm"), out[i])
    print(f"wrote {out.shape[0]} edited images to {args.out}")
    return 0


def _cmd_ablate(args) -> int:
    spec = ExperimentSpec(
        config=_load_config(args.config),
        out_dir=args.out or "",
        seed=args.seed,
        task=args.task,
        sample_count=args.n,
        image_size=args.size,
        steps=args.steps,
    )
    threads = max(1, int(os.environ.get("GENIE_THREADS", "1")))
    report = run_ablation(
        spec.config,
        args.lattice,
        spec.task,
        spec.image_size,
        spec.sample_count,
        args.n_eval,
        spec.steps,
        spec.seed,
        out_dir=spec.out_dir or None,
        threads=threads,
    )
    from .experiments import format_report

    print(format_report(report), end="")
    return 0


def _read_image_file(path: str) -> np.ndarray:
    if path.endswith(".tns"):
        arrays = load_tensors(path)
        if "image" in arrays:
            return arrays["image"]
        return arrays[sorted(arrays)[0]]
    return read_pnm(path)


def _image_map(directory: str) -> dict[str, str]:
    exts = (".tns", ".ppm", ".pgm", ".pnm")
    out = {}
    for name in sorted(os.listdir(directory)):
        if name.endswith(exts):
            out[os.path.splitext(name)[0]] = os.path.join(directory, name)
    if not out:
        raise FileNotFoundError(f"no image files (tns/pnm) under {directory}")
    return out


def _cmd_metrics(args) -> int:
    map_a = _image_map(args.dir_a)
    map_b = _image_map(args.dir_b)
    common = sorted(set(map_a) & set(map_b))
    if not common:
        raise FileNotFoundError("no matching file stems between the two directories")
    pairs = []
    for stem in common:
        a = _read_image_file(map_a[stem])
        b = _read_image_file(map_b[stem])
        pairs.append({"name": stem, "psnr": psnr(a, b), "ssim": ssim(a, b)})
    aggregate = {
        "psnr": float(np.mean([p["psnr"] for p in pairs])),
        "ssim": float(np.mean([p["ssim"] for p in pairs])),
        "count": len(pairs),
    }
    report = {"pairs": pairs, "aggregate": aggregate}
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    print(text)
    return 0


_COMMANDS = {
    "gradcheck": _cmd_gradcheck,
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "sample": _cmd_sample,
    "ablate": _cmd_ablate,
    "metrics": _cmd_metrics,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
