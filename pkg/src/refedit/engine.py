"""Dense float64 tensors and taped reverse-mode differentiation.

The tape is a per-thread Wengert list: every tracked operation appends one
entry in execution order, and ``backward`` plays the entries exactly once
each, in reverse, accumulating adjoints into ``Tensor.grad`` buffers.

Broadcasting follows trailing-dimension alignment (missing leading axes act
as size 1, axes of size 1 stretch); adjoints of broadcast inputs are summed
back down to the input shape.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional

import numpy as np

__all__ = [
    "GradTape",
    "ShapeError",
    "Tensor",
    "accumulate",
    "active_tape",
    "as_tensor",
    "backward",
    "first_nonfinite_op",
    "grad_enabled",
    "no_grad",
    "record",
]


class ShapeError(ValueError):
    """Operand shapes cannot be combined."""


class Tensor:
    """Dense N-dimensional float64 value, optionally tracked for gradients.

    ``data`` is always a C-contiguous float64 array. ``grad``, when present,
    has the same shape as ``data`` and accumulates additively across uses
    and across ``backward`` calls until ``zero_grad``.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        # asarray with order="C" keeps 0-d shapes (ascontiguousarray would not)
        self.data: np.ndarray = np.asarray(data, dtype=np.float64, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(())[()])

    def detach(self) -> "Tensor":
        """Same values, cut loose from the graph. Shares the data buffer."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={list(self.shape)}, requires_grad={self.requires_grad})"


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


class TapeEntry:
    __slots__ = ("name", "apply", "out")

    def __init__(self, name: str, apply: Callable[[], None], out: Tensor):
        self.name = name
        self.apply = apply
        self.out = out


class GradTape:
    """Ordered record of tracked operations.

    Also a context manager: inside a ``with GradTape():`` block, operations
    record onto this tape instead of the thread's current one, which bounds
    the lifetime of saved intermediates to the block.
    """

    def __init__(self):
        self.entries: list[TapeEntry] = []

    def record(self, name: str, apply: Callable[[], None], out: Tensor) -> None:
        self.entries.append(TapeEntry(name, apply, out))

    def clear(self) -> None:
        self.entries.clear()

    def __len__(self) -> int:
        return len(self.entries)

    def __enter__(self) -> "GradTape":
        _stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _stack().pop()
        assert popped is self, "unbalanced tape stack"
        return False


_LOCAL = threading.local()


def _stack() -> list:
    stack = getattr(_LOCAL, "stack", None)
    if stack is None:
        stack = [GradTape()]  # per-thread root tape
        _LOCAL.stack = stack
    return stack


def active_tape() -> Optional[GradTape]:
    return _stack()[-1]


def grad_enabled() -> bool:
    return _stack()[-1] is not None


class no_grad:
    """Inside this context, ops record nothing and outputs are untracked."""

    def __enter__(self):
        _stack().append(None)
        return self

    def __exit__(self, exc_type, exc, tb):
        _stack().pop()
        return False


def record(name: str, apply: Callable[[], None], out: Tensor) -> None:
    tape = _stack()[-1]
    if tape is not None:
        tape.record(name, apply, out)


def accumulate(t: Tensor, g: np.ndarray) -> None:
    """Add ``g`` into ``t.grad``, allocating the buffer on first use."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def first_nonfinite_op() -> Optional[str]:
    """Name of the earliest recorded op whose output holds NaN/Inf, if any."""
    tape = _stack()[-1]
    if tape is None:
        return None
    for entry in tape.entries:
        if not np.all(np.isfinite(entry.out.data)):
            return entry.name
    return None


def backward(loss: Tensor, *, retain_tape: bool = False) -> None:
    """Populate gradients of everything the scalar ``loss`` depends on.

    Seeds ``loss.grad`` with ones, walks the active tape once in reverse
    execution order, then clears the tape (unless ``retain_tape``).
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = _stack()[-1]
    if tape is None:
        raise RuntimeError("backward called inside no_grad")
    if not tape.entries:
        raise RuntimeError("backward called on an empty tape")
    if not loss.requires_grad:
        raise RuntimeError("loss is not tracked; nothing to differentiate")
    accumulate(loss, np.ones_like(loss.data))
    for entry in reversed(tape.entries):
        entry.apply()
    if not retain_tape:
        tape.clear()
