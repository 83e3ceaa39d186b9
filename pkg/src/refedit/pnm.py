"""Minimal binary PNM (P5 gray / P6 RGB, 8-bit) reading and writing."""

from __future__ import annotations

import numpy as np

__all__ = ["read_pnm", "write_pnm"]


def write_pnm(path, img: np.ndarray) -> None:
    """Write an image in [0, 1] ([H,W], [1,H,W] or [3,H,W]) as 8-bit PNM."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise ValueError(f"expected [H,W], [1,H,W] or [3,H,W], got {img.shape}")
    magic = b"P5" if img.shape[0] == 1 else b"P6"
    data = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    body = data[0] if img.shape[0] == 1 else data.transpose(1, 2, 0)
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (img.shape[2], img.shape[1]))
        fh.write(body.tobytes())


def _tokens(fh):
    # Header tokens separated by whitespace; '#' starts a comment to end of line.
    while True:
        ch = fh.read(1)
        if not ch:
            raise ValueError("truncated PNM header")
        if ch.isspace():
            continue
        if ch == b"#":
            while ch not in (b"\n", b""):
                ch = fh.read(1)
            continue
        token = ch
        while True:
            ch = fh.read(1)
            if not ch or ch.isspace():
                break
            token += ch
        yield token


def read_pnm(path) -> np.ndarray:
    """Read an 8-bit binary PNM into float64 [C, H, W] in [0, 1]."""
    with open(path, "rb") as fh:
        tok = _tokens(fh)
        magic = next(tok)
        if magic not in (b"P5", b"P6"):
            raise ValueError(f"unsupported PNM magic {magic!r} (need binary P5/P6)")
        width = int(next(tok))
        height = int(next(tok))
        maxval = int(next(tok))
        if maxval != 255:
            raise ValueError(f"only 8-bit PNM supported, got maxval {maxval}")
        channels = 1 if magic == b"P5" else 3
        raw = fh.read(width * height * channels)
        if len(raw) != width * height * channels:
            raise ValueError("truncated PNM data")
    arr = np.frombuffer(raw, dtype=np.uint8).astype(np.float64) / 255.0
    if channels == 1:
        return arr.reshape(1, height, width)
    return arr.reshape(height, width, 3).transpose(2, 0, 1)
