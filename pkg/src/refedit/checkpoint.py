"""Portable binary dump of named float64 tensors; bit-exact round-trip.

Layout (all integers are unsigned 64-bit little-endian):

    magic   8 bytes, b"TNSDUMP1"
    version u64, currently 1
    then, repeated until end of file, one record per tensor:
        name_len u64 | name (UTF-8, name_len bytes) | rank u64 |
        dims[rank] u64 each | data (row-major float64, little-endian)

Records are written sorted by name so equal contents give equal bytes.
"""

from __future__ import annotations

import os
from typing import Mapping

import numpy as np

MAGIC = b"TNSDUMP1"
VERSION = 1

__all__ = ["MAGIC", "VERSION", "load_tensors", "save_tensors"]


def _u64(n: int) -> bytes:
    return int(n).to_bytes(8, "little")


def save_tensors(path, tensors: Mapping[str, object]) -> None:
    """Write named arrays (ndarray or Tensor) atomically to ``path``."""
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_u64(VERSION))
        for name in sorted(tensors):
            # order="C" keeps 0-d shapes (ascontiguousarray would promote to 1-d)
            arr = np.asarray(getattr(tensors[name], "data", tensors[name]), dtype=np.float64, order="C")
            encoded = name.encode("utf-8")
            fh.write(_u64(len(encoded)))
            fh.write(encoded)
            fh.write(_u64(arr.ndim))
            for dim in arr.shape:
                fh.write(_u64(dim))
            fh.write(arr.astype("<f8", copy=False).tobytes())
    os.replace(tmp, path)


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ValueError(f"truncated tensor dump while reading {what}")
    return buf


def _read_u64(fh, what: str) -> int:
    return int.from_bytes(_read_exact(fh, 8, what), "little")


def load_tensors(path) -> dict[str, np.ndarray]:
    """Read a dump back into a name -> float64 ndarray mapping."""
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"not a tensor dump: bad magic {magic!r}")
        version = _read_u64(fh, "version")
        if version != VERSION:
            raise ValueError(f"unsupported tensor dump version {version}")
        while True:
            head = fh.read(8)
            if not head:
                break
            if len(head) != 8:
                raise ValueError("truncated tensor dump while reading name length")
            name_len = int.from_bytes(head, "little")
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            rank = _read_u64(fh, "rank")
            dims = tuple(_read_u64(fh, f"dim {i} of {name}") for i in range(rank))
            count = 1
            for d in dims:
                count *= d
            raw = _read_exact(fh, 8 * count, f"data of {name}")
            out[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(dims)
    return out
