"""Dual-branch latent editing pipeline.

The reference branch encodes the reference image, optionally canonicalizes it
with the learned affine warp, and runs a U-Net whose mid/up features are
purified by the adaptive scaling module. The target branch is a U-Net over
the channel-concatenated (noisy latent, downsampled mask, unedited-region
latent) conditioning; at its mid block and each up level it receives a global
reference token through a small cross-attention and, when fusion is enabled,
the purified reference feature of the same level through the three-branch
attention fusion. The two branches run level-synchronized so the scaling
module can read the same-level target feature of the current step.

Training minimizes noise-prediction error plus a reconstruction term that
keeps the stand-in autoencoder informative (the noise objective alone never
reaches the decoder). Sampling runs the standard reverse updates and
composites the decoded result into the target outside the mask.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import ops
from .alignment import apply_spatial_alignment, init_alignment_params
from .checkpoint import load_tensors, save_tensors
from .config import ModelConfig, config_to_dict
from .engine import GradTape, ShapeError, Tensor, backward, first_nonfinite_op, no_grad
from .fusion import AttentionBlockParams, attn, init_fusion_params, map_from_seq, paf_fuse, seq_from_map
from .optim import AdamState, adam_update, frozen_param_names
from .scaling import apply_adaptive_scaling, init_scaling_params
from .schedule import DiffusionSchedule, add_noise, build_schedule
from .unet import (
    init_unet,
    site_names,
    timestep_embedding,
    unet_down,
    unet_in,
    unet_mid,
    unet_out,
    unet_up,
    unet_widths,
)

__all__ = [
    "EditingInputs",
    "adapter_token",
    "assemble_target_input",
    "decode_latent",
    "downsample_mask",
    "dual_forward",
    "encode_image",
    "init_model_params",
    "load_checkpoint",
    "mse",
    "predict_noise",
    "reference_forward",
    "sample",
    "save_checkpoint",
    "site_widths",
    "training_step",
]

DOWNSAMPLE = 4  # image -> latent spatial reduction


@dataclass
class EditingInputs:
    """One batch of editing conditions: reference, target, binary mask."""

    ref_image: np.ndarray  # [N, 3, H, W] in [0, 1]
    target_image: np.ndarray  # [N, 3, H, W] in [0, 1]
    mask: np.ndarray  # [N, 1, H, W] with values in {0, 1}

    def __post_init__(self):
        self.ref_image = np.asarray(self.ref_image, dtype=np.float64)
        self.target_image = np.asarray(self.target_image, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=np.float64)
        for name, img in (("ref_image", self.ref_image), ("target_image", self.target_image)):
            if img.ndim != 4 or img.shape[1] != 3:
                raise ValueError(f"{name} must be [N, 3, H, W], got {img.shape}")
            if img.min() < 0.0 or img.max() > 1.0:
                raise ValueError(f"{name} values must lie in [0, 1]")
        if self.mask.ndim != 4 or self.mask.shape[1] != 1:
            raise ValueError(f"mask must be [N, 1, H, W], got {self.mask.shape}")
        if self.mask.shape[0] != self.ref_image.shape[0] or self.mask.shape[2:] != self.ref_image.shape[2:]:
            raise ValueError("mask batch/spatial dims must match the images")
        if not np.all((self.mask == 0.0) | (self.mask == 1.0)):
            raise ValueError("mask must be strictly binary")


def site_widths(config: ModelConfig) -> list[tuple[str, int]]:
    """Injection sites with their channel widths, in execution order."""
    widths = unet_widths(config.base_width, config.level_count)
    pairs = [("mid", widths[-1])]
    for j, i in enumerate(reversed(range(config.level_count))):
        pairs.append((f"up{j}", widths[i]))
    return pairs


def _temb_dim(config: ModelConfig) -> int:
    return 2 * config.base_width


def init_model_params(config: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """All learnable tensors, keyed by dotted names (also the checkpoint names)."""
    config.validate()
    base, lat = config.base_width, config.latent_channels
    params: dict[str, Tensor] = {}

    def conv(c_out, c_in, gain=2.0):
        return Tensor(rng.normal(0.0, (gain / (c_in * 9)) ** 0.5, (c_out, c_in, 3, 3)), True)

    params["vae.enc.c1.w"] = conv(base, 3)
    params["vae.enc.c1.b"] = Tensor(np.zeros(base), True)
    params["vae.enc.c2.w"] = conv(lat, base)
    params["vae.enc.c2.b"] = Tensor(np.zeros(lat), True)
    params["vae.dec.c1.w"] = conv(base, lat)
    params["vae.dec.c1.b"] = Tensor(np.zeros(base), True)
    params["vae.dec.c2.w"] = conv(3, base, gain=1.0)
    params["vae.dec.c2.b"] = Tensor(np.zeros(3), True)

    for key, value in init_alignment_params(lat, rng).items():
        params["sam." + key] = value

    init_unet(params, "unet_ref.", lat, lat, base, config.level_count, rng)
    # The reference branch feeds fusion directly; its out-conv is never used.
    del params["unet_ref.out.w"], params["unet_ref.out.b"]

    temb_dim = _temb_dim(config)
    init_unet(params, "unet_tar.", 2 * lat + 1, lat, base, config.level_count, rng, temb_dim=temb_dim)
    params["unet_tar.temb.l1.w"] = Tensor(rng.normal(0.0, temb_dim**-0.5, (temb_dim, temb_dim)), True)
    params["unet_tar.temb.l1.b"] = Tensor(np.zeros(temb_dim), True)
    params["unet_tar.temb.l2.w"] = Tensor(rng.normal(0.0, temb_dim**-0.5, (temb_dim, temb_dim)), True)
    params["unet_tar.temb.l2.b"] = Tensor(np.zeros(temb_dim), True)

    adapter_dim = base
    params["adapter.embed.l1.w"] = Tensor(rng.normal(0.0, lat**-0.5, (lat, adapter_dim)), True)
    params["adapter.embed.l1.b"] = Tensor(np.zeros(adapter_dim), True)
    params["adapter.embed.l2.w"] = Tensor(rng.normal(0.0, adapter_dim**-0.5, (adapter_dim, adapter_dim)), True)
    params["adapter.embed.l2.b"] = Tensor(np.zeros(adapter_dim), True)

    for site, width in site_widths(config):
        for key, value in init_scaling_params(width, rng, config.alpha_per_channel).items():
            params[f"arsm.{site}.{key}"] = value
        for key, value in init_fusion_params(width, rng).items():
            params[f"paf.{site}.{key}"] = value
        params[f"adapter.{site}.q.w"] = Tensor(rng.normal(0.0, width**-0.5, (width, width)), True)
        params[f"adapter.{site}.k.w"] = Tensor(rng.normal(0.0, adapter_dim**-0.5, (adapter_dim, width)), True)
        params[f"adapter.{site}.v.w"] = Tensor(rng.normal(0.0, adapter_dim**-0.5, (adapter_dim, width)), True)
        params[f"adapter.{site}.o.w"] = Tensor(np.zeros((width, width)), True)
    return params


def encode_image(img: Tensor, params, config: ModelConfig) -> Tensor:
    """Image [N, 3, H, W] -> latent [N, C, H/4, W/4]; deterministic."""
    img = img if isinstance(img, Tensor) else Tensor(img)
    if img.shape[2] % DOWNSAMPLE or img.shape[3] % DOWNSAMPLE:
        raise ShapeError(f"image spatial dims must be divisible by {DOWNSAMPLE}, got {img.shape}")
    h = ops.silu(ops.conv2d(img, params["vae.enc.c1.w"], params["vae.enc.c1.b"], stride=2, padding=1))
    return ops.conv2d(h, params["vae.enc.c2.w"], params["vae.enc.c2.b"], stride=2, padding=1)


def decode_latent(z: Tensor, params, config: ModelConfig) -> Tensor:
    h = ops.upsample_nearest2(z)
    h = ops.silu(ops.conv2d(h, params["vae.dec.c1.w"], params["vae.dec.c1.b"], padding=1))
    h = ops.upsample_nearest2(h)
    return ops.conv2d(h, params["vae.dec.c2.w"], params["vae.dec.c2.b"], padding=1)


def downsample_mask(mask: np.ndarray) -> np.ndarray:
    """Area-average a [N, 1, H, W] mask down to latent resolution (values in [0, 1])."""
    mask = np.asarray(mask, dtype=np.float64)
    n, c, h, w = mask.shape
    f = DOWNSAMPLE
    return mask.reshape(n, c, h // f, f, w // f, f).mean(axis=(3, 5))


def assemble_target_input(z_t: Tensor, mask, z_masked: Tensor) -> Tensor:
    """Channel-concatenate (noisy latent, mask representation, unedited-region latent)."""
    mask_arr = np.asarray(getattr(mask, "data", mask), dtype=np.float64)
    phi = Tensor(downsample_mask(mask_arr))
    if phi.shape[2:] != z_t.shape[2:]:
        raise ShapeError(f"mask {mask_arr.shape} downsamples to {phi.shape}, latent is {z_t.shape}")
    return ops.concat([z_t, phi, z_masked], axis=1)


def adapter_token(ref_image: Tensor, params, config: ModelConfig) -> Tensor:
    """Global reference embedding as a length-1 sequence, from the (aligned) latent."""
    ref_image = ref_image if isinstance(ref_image, Tensor) else Tensor(ref_image)
    lat = encode_image(ref_image, params, config)
    if config.enable_sam:
        lat = apply_spatial_alignment(lat, params, "sam.")
    return _adapter_token(lat, params)


def _adapter_token(ref_latent: Tensor, params) -> Tensor:
    pooled = ops.mean(ref_latent, axis=(2, 3))
    h = ops.silu(ops.add(ops.matmul(pooled, params["adapter.embed.l1.w"]), params["adapter.embed.l1.b"]))
    tok = ops.add(ops.matmul(h, params["adapter.embed.l2.w"]), params["adapter.embed.l2.b"])
    return ops.reshape(tok, (tok.shape[0], 1, tok.shape[1]))


def _adapter_attend(h_map: Tensor, token: Tensor, params, site: str) -> Tensor:
    width = h_map.shape[1]
    p = AttentionBlockParams(
        wq=params[f"adapter.{site}.q.w"],
        wk=params[f"adapter.{site}.k.w"],
        wv=params[f"adapter.{site}.v.w"],
        wo=params[f"adapter.{site}.o.w"],
        head_count=1,
        head_dim=width,
    )
    seq = seq_from_map(h_map)
    out = attn(seq, token, p)
    return ops.add(h_map, map_from_seq(out, (h_map.shape[2], h_map.shape[3])))


class _RefBranch:
    """Reference U-Net advanced one injection site at a time, so the scaling
    module can read the just-computed target feature of the same site."""

    def __init__(self, ref_latent: Tensor, params, config: ModelConfig):
        self.params = params
        self.config = config
        h = unet_in(ref_latent, params, "unet_ref.")
        self.h, self.skips = unet_down(h, params, "unet_ref.", config.level_count)
        self.next_up = 0

    def advance(self, site: str, target_feat) -> Tensor:
        if site == "mid":
            h = unet_mid(self.h, self.params, "unet_ref.")
        else:
            j = self.next_up
            if site != f"up{j}":
                raise ValueError(f"reference branch expected site up{j}, got {site}")
            skip = self.skips[self.config.level_count - 1 - j]
            h = unet_up(self.h, skip, self.params, "unet_ref.", j)
            self.next_up += 1
        if self.config.enable_arsm:
            if target_feat is None:
                raise ValueError("adaptive scaling is enabled but no lockstep target feature was given")
            h = apply_adaptive_scaling(h, target_feat, self.params, f"arsm.{site}.")
        self.h = h
        return h


def _time_embedding(t, n: int, params, config: ModelConfig) -> Tensor:
    t_arr = np.asarray(t, dtype=np.int64)
    if t_arr.ndim == 0:
        t_arr = np.full(n, int(t_arr))
    emb = Tensor(timestep_embedding(t_arr, _temb_dim(config)))
    h = ops.silu(ops.add(ops.matmul(emb, params["unet_tar.temb.l1.w"]), params["unet_tar.temb.l1.b"]))
    return ops.add(ops.matmul(h, params["unet_tar.temb.l2.w"]), params["unet_tar.temb.l2.b"])


def _inject(h_t: Tensor, site: str, idx: int, params, config, token, ref_branch, ref_features, debug) -> Tensor:
    if token is not None:
        h_t = _adapter_attend(h_t, token, params, site)
    if config.enable_paf:
        if ref_branch is not None:
            h_r = ref_branch.advance(site, h_t)
        elif ref_features is not None:
            h_r = ref_features[idx]
        else:
            raise ValueError("fusion is enabled but no reference features were supplied")
        h_t = ops.add(h_t, paf_fuse(h_t, h_r, params, f"paf.{site}.", debug=debug))
    return h_t


def _target_unet(cond: Tensor, t, params, config: ModelConfig, token, ref_branch, ref_features, debug) -> Tensor:
    levels = config.level_count
    temb = _time_embedding(t, cond.shape[0], params, config)
    h = unet_in(cond, params, "unet_tar.")
    h, skips = unet_down(h, params, "unet_tar.", levels, temb)
    h = unet_mid(h, params, "unet_tar.", temb)
    h = _inject(h, "mid", 0, params, config, token, ref_branch, ref_features, debug)
    for j in range(levels):
        h = unet_up(h, skips[levels - 1 - j], params, "unet_tar.", j, temb)
        h = _inject(h, f"up{j}", 1 + j, params, config, token, ref_branch, ref_features, debug)
    return unet_out(h, params, "unet_tar.")


def dual_forward(z_t: Tensor, cond: Tensor, ref_image: Tensor, t, params, config: ModelConfig, debug=None) -> Tensor:
    """Full level-synchronized pass of both branches; returns predicted noise."""
    ref_image = ref_image if isinstance(ref_image, Tensor) else Tensor(ref_image)
    ref_lat = encode_image(ref_image, params, config)
    if config.enable_sam:
        ref_lat = apply_spatial_alignment(ref_lat, params, "sam.")
    token = _adapter_token(ref_lat, params)
    branch = _RefBranch(ref_lat, params, config) if config.enable_paf else None
    eps_hat = _target_unet(cond, t, params, config, token, branch, None, debug)
    if eps_hat.shape != z_t.shape:
        raise ShapeError(f"predicted noise shape {eps_hat.shape} != latent shape {z_t.shape}")
    return eps_hat


def reference_forward(ref_image: Tensor, params, config: ModelConfig, target_features=None) -> list[Tensor]:
    """Reference half on its own: encode, align, U-Net, per-site purification.

    ``target_features`` supplies the lockstep target feature per site (same
    order as :func:`site_widths`); required when adaptive scaling is enabled.
    """
    ref_image = ref_image if isinstance(ref_image, Tensor) else Tensor(ref_image)
    lat = encode_image(ref_image, params, config)
    if config.enable_sam:
        lat = apply_spatial_alignment(lat, params, "sam.")
    branch = _RefBranch(lat, params, config)
    feats = []
    for idx, site in enumerate(site_names(config.level_count)):
        tf = None if target_features is None else target_features[idx]
        feats.append(branch.advance(site, tf))
    return feats


def predict_noise(z_t: Tensor, cond: Tensor, ref_features, t, params, config: ModelConfig, ref_token=None, debug=None) -> Tensor:
    """Target branch over precomputed reference features; returns predicted noise."""
    expected = 2 * config.latent_channels + 1
    if cond.shape[1] != expected:
        raise ShapeError(f"conditioning needs {expected} channels, got {cond.shape}")
    eps_hat = _target_unet(cond, t, params, config, ref_token, None, ref_features, debug)
    if eps_hat.shape != z_t.shape:
        raise ShapeError(f"predicted noise shape {eps_hat.shape} != latent shape {z_t.shape}")
    return eps_hat


def mse(a: Tensor, b: Tensor) -> Tensor:
    d = ops.sub(a, b)
    return ops.mean(ops.mul(d, d))


def training_step(
    inputs: EditingInputs,
    ground_truth: np.ndarray,
    params,
    opt_state: AdamState,
    sched: DiffusionSchedule,
    config: ModelConfig,
    rng: np.random.Generator,
) -> float:
    """One optimization step; returns the noise-prediction loss.

    The optimized objective adds a reconstruction term for the stand-in
    autoencoder; frozen parameter groups receive no update.
    """
    gt = Tensor(np.asarray(ground_truth, dtype=np.float64))
    with GradTape():
        z0 = encode_image(gt, params, config)
        recon = decode_latent(z0, params, config)
        t_arr = rng.integers(0, sched.T, size=z0.shape[0])
        eps = Tensor(rng.standard_normal(z0.shape))
        z_t = add_noise(z0, eps, t_arr, sched)
        z_masked = encode_image(Tensor(inputs.target_image * (1.0 - inputs.mask)), params, config)
        cond = assemble_target_input(z_t, inputs.mask, z_masked)
        eps_hat = dual_forward(z_t, cond, Tensor(inputs.ref_image), t_arr, params, config)
        loss_eps = mse(eps_hat, eps)
        total = ops.add(loss_eps, mse(recon, gt))
        if not np.isfinite(total.data).all():
            culprit = first_nonfinite_op()
            raise FloatingPointError(f"non-finite training loss; first non-finite tensor from op: {culprit}")
        for p in params.values():
            p.grad = None
        backward(total)
        grads = {name: p.grad for name, p in params.items()}
        adam_update(params, grads, opt_state, config.learning_rate, frozen_param_names(params, config))
    return float(loss_eps.data)


def sample(target_image, mask, ref_image, params, sched: DiffusionSchedule, config: ModelConfig, seed: int) -> np.ndarray:
    """Iterative reverse denoising; the unedited region is preserved exactly.

    Starts from standard-normal latent noise, denoises with the full model,
    decodes, clips to [0, 1] and composites: out * M + target * (1 - M).
    """
    rng = np.random.default_rng(seed)
    tar = np.asarray(getattr(target_image, "data", target_image), dtype=np.float64)
    msk = np.asarray(getattr(mask, "data", mask), dtype=np.float64)
    ref = np.asarray(getattr(ref_image, "data", ref_image), dtype=np.float64)
    n = tar.shape[0]
    lat_shape = (n, config.latent_channels, tar.shape[2] // DOWNSAMPLE, tar.shape[3] // DOWNSAMPLE)
    with no_grad():
        z_masked = encode_image(Tensor(tar * (1.0 - msk)), params, config)
        ref_t = Tensor(ref)
        z = Tensor(rng.standard_normal(lat_shape))
        for ti in range(sched.T - 1, -1, -1):
            cond = assemble_target_input(z, msk, z_masked)
            eps_hat = dual_forward(z, cond, ref_t, ti, params, config)
            beta = sched.betas[ti]
            abar = sched.alpha_bar[ti]
            mean_ = (z.data - beta / np.sqrt(1.0 - abar) * eps_hat.data) / np.sqrt(1.0 - beta)
            if ti > 0:
                abar_prev = sched.alpha_bar[ti - 1]
                sigma = np.sqrt(beta * (1.0 - abar_prev) / (1.0 - abar))
                z = Tensor(mean_ + sigma * rng.standard_normal(lat_shape))
            else:
                z = Tensor(mean_)
        img = np.clip(decode_latent(z, params, config).data, 0.0, 1.0)
    return img * msk + tar * (1.0 - msk)


def save_checkpoint(out_dir, params, config: ModelConfig, step: int) -> None:
    os.makedirs(out_dir, exist_ok=True)
    save_tensors(os.path.join(out_dir, "checkpoint.tns"), params)
    manifest = {"step": int(step), "config": config_to_dict(config)}
    tmp = os.path.join(out_dir, "manifest.json.tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, os.path.join(out_dir, "manifest.json"))


def load_checkpoint(out_dir) -> tuple[dict[str, Tensor], ModelConfig, int]:
    with open(os.path.join(out_dir, "manifest.json"), "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    config = ModelConfig(**manifest["config"]).validate()
    arrays = load_tensors(os.path.join(out_dir, "checkpoint.tns"))
    params = {name: Tensor(arr, True) for name, arr in arrays.items()}
    return params, config, int(manifest["step"])
