"""Differentiable operations over :class:`~refedit.engine.Tensor` values.

Every op computes its result eagerly with numpy and, when any input is
tracked, records a closure on the active tape that pushes the output adjoint
back to the inputs.
"""

from __future__ import annotations

import numpy as np

from .engine import ShapeError, Tensor, accumulate, as_tensor, grad_enabled, record

__all__ = [
    "add",
    "concat",
    "concat_channels",
    "conv2d",
    "elementwise",
    "matmul",
    "mean",
    "mul",
    "neg",
    "reshape",
    "sigmoid",
    "silu",
    "slice_axis",
    "softmax_last_axis",
    "sub",
    "sum",
    "tanh_op",
    "transpose",
    "upsample_nearest2",
]

# tanh saturates to exactly 1.0 in float64 past ~19, so outputs are clamped
# to keep the open interval contract. Two ulps of margin, not one: 1 + (1 - 2^-53)
# would round up to exactly 2, while 1 + (1 - 2^-52) stays strictly below it.
_TANH_BOUND = 1.0 - 2.0**-52


def _track(*tensors: Tensor) -> bool:
    return grad_enabled() and any(t.requires_grad for t in tensors)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum the stretched axes of a broadcast adjoint back to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    out = Tensor(a.data + b.data, requires_grad=_track(a, b))
    if out.requires_grad:

        def apply():
            g = out.grad
            if g is None:
                return
            accumulate(a, _unbroadcast(g, a.data.shape))
            accumulate(b, _unbroadcast(g, b.data.shape))

        record("add", apply, out)
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    out = Tensor(a.data - b.data, requires_grad=_track(a, b))
    if out.requires_grad:

        def apply():
            g = out.grad
            if g is None:
                return
            accumulate(a, _unbroadcast(g, a.data.shape))
            accumulate(b, _unbroadcast(-g, b.data.shape))

        record("sub", apply, out)
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    out = Tensor(a.data * b.data, requires_grad=_track(a, b))
    if out.requires_grad:

        def apply():
            g = out.grad
            if g is None:
                return
            accumulate(a, _unbroadcast(g * b.data, a.data.shape))
            accumulate(b, _unbroadcast(g * a.data, b.data.shape))

        record("mul", apply, out)
    return out


def neg(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(-a.data, requires_grad=_track(a))
    if out.requires_grad:

        def apply():
            if out.grad is not None:
                accumulate(a, -out.grad)

        record("neg", apply, out)
    return out


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul}


def elementwise(a, b, op: str) -> Tensor:
    """Dispatch on the op name; supports add, sub and mul."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}; expected one of {sorted(_ELEMENTWISE)}") from None
    return fn(a, b)


def _axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - numpy-style name
    x = as_tensor(x)
    axes = _axes(axis, x.ndim)
    out = Tensor(x.data.sum(axis=axes, keepdims=keepdims), requires_grad=_track(x))
    if out.requires_grad:

        def apply():
            g = out.grad
            if g is None:
                return
            if not keepdims:
                g = np.expand_dims(g, axes)
            accumulate(x, np.broadcast_to(g, x.data.shape).copy())

        record("sum", apply, out)
    return out


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _axes(axis, x.ndim)
    count = 1
    for ax in axes:
        count *= x.data.shape[ax]
    out = Tensor(x.data.mean(axis=axes, keepdims=keepdims), requires_grad=_track(x))
    if out.requires_grad:

        def apply():
            g = out.grad
            if g is None:
                return
            if not keepdims:
                g = np.expand_dims(g, axes)
            accumulate(x, np.broadcast_to(g / count, x.data.shape).copy())

        record("mean", apply, out)
    return out


def _swap(m: np.ndarray) -> np.ndarray:
    return np.swapaxes(m, -1, -2)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.data.shape[:-2], b.data.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: leading dimensions not broadcastable: {a.shape} @ {b.shape}") from None
    out = Tensor(a.data @ b.data, requires_grad=_track(a, b))
    if out.requires_grad:

        def apply():
            g = out.grad
            if g is None:
                return
            accumulate(a, _unbroadcast(g @ _swap(b.data), a.data.shape))
            accumulate(b, _unbroadcast(_swap(a.data) @ g, b.data.shape))

        record("matmul", apply, out)
    return out


def tanh_op(x) -> Tensor:
    x = as_tensor(x)
    y = np.clip(np.tanh(x.data), -_TANH_BOUND, _TANH_BOUND)
    out = Tensor(y, requires_grad=_track(x))
    if out.requires_grad:

        def apply():
            g = out.grad
            if g is None:
                return
            accumulate(x, (1.0 - y * y) * g)

        record("tanh", apply, out)
    return out


def _sigmoid_values(x: np.ndarray) -> np.ndarray:
    # Split by sign so exp never overflows.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = _sigmoid_values(x.data)
    out = Tensor(y, requires_grad=_track(x))
    if out.requires_grad:

        def apply():
            g = out.grad
            if g is None:
                return
            accumulate(x, y * (1.0 - y) * g)

        record("sigmoid", apply, out)
    return out


def silu(x) -> Tensor:
    """x * sigmoid(x); the smooth nonlinearity used throughout the nets."""
    x = as_tensor(x)
    s = _sigmoid_values(x.data)
    out = Tensor(x.data * s, requires_grad=_track(x))
    if out.requires_grad:

        def apply():
            g = out.grad
            if g is None:
                return
            accumulate(x, s * (1.0 + x.data * (1.0 - s)) * g)

        record("silu", apply, out)
    return out


def softmax_last_axis(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim < 1:
        raise ShapeError("softmax_last_axis needs rank >= 1")
    z = x.data - x.data.max(axis=-1, keepdims=True)  # max subtraction keeps exp finite
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y, requires_grad=_track(x))
    if out.requires_grad:

        def apply():
            g = out.grad
            if g is None:
                return
            accumulate(x, y * (g - (g * y).sum(axis=-1, keepdims=True)))

        record("softmax", apply, out)
    return out


def concat(tensors, axis: int) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of zero tensors")
    ndim = ts[0].ndim
    ax = axis % ndim
    for t in ts[1:]:
        if t.ndim != ndim or any(i != ax and t.shape[i] != ts[0].shape[i] for i in range(ndim)):
            raise ShapeError(
                f"concat along axis {ax}: shapes {[list(t.shape) for t in ts]} differ off-axis"
            )
    out = Tensor(np.concatenate([t.data for t in ts], axis=ax), requires_grad=_track(*ts))
    if out.requires_grad:
        sizes = [t.shape[ax] for t in ts]

        def apply():
            g = out.grad
            if g is None:
                return
            start = 0
            for t, n in zip(ts, sizes):
                sl = [slice(None)] * ndim
                sl[ax] = slice(start, start + n)
                accumulate(t, g[tuple(sl)])
                start += n

        record("concat", apply, out)
    return out


def concat_channels(a, b) -> Tensor:
    """Concatenate along axis 1 (the channel axis of NCHW maps)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != b.ndim or a.ndim < 2:
        raise ShapeError(f"concat_channels: ranks differ or too small: {a.shape} vs {b.shape}")
    for i in range(a.ndim):
        if i != 1 and a.shape[i] != b.shape[i]:
            raise ShapeError(f"concat_channels: non-channel axis {i} differs: {a.shape} vs {b.shape}")
    return concat([a, b], axis=1)


def slice_axis(x, axis: int, start: int, length: int) -> Tensor:
    x = as_tensor(x)
    ax = axis % x.ndim
    if start < 0 or start + length > x.shape[ax]:
        raise ShapeError(f"slice [{start}:{start + length}) outside axis {ax} of shape {x.shape}")
    sl = [slice(None)] * x.ndim
    sl[ax] = slice(start, start + length)
    out = Tensor(x.data[tuple(sl)], requires_grad=_track(x))
    if out.requires_grad:

        def apply():
            g = out.grad
            if g is None:
                return
            full = np.zeros_like(x.data)
            full[tuple(sl)] = g
            accumulate(x, full)

        record("slice", apply, out)
    return out


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data.reshape(shape), requires_grad=_track(x))
    if out.requires_grad:

        def apply():
            g = out.grad
            if g is None:
                return
            accumulate(x, g.reshape(x.data.shape))

        record("reshape", apply, out)
    return out


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(x.data.transpose(axes), requires_grad=_track(x))
    if out.requires_grad:

        def apply():
            g = out.grad
            if g is None:
                return
            accumulate(x, g.transpose(inv))

        record("transpose", apply, out)
    return out


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of NCHW input with OIHW kernels, zero padded.

    Output spatial size is floor((H + 2p - kH) / s) + 1 per axis.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    b = as_tensor(bias) if bias is not None else None
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d needs 4D input and kernel, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    c_out, c_in, kh, kw = weight.shape
    if c_in != c:
        raise ShapeError(f"conv2d: input has {c} channels but kernel expects {c_in}")
    if b is not None and b.shape != (c_out,):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({c_out},)")
    s, p = int(stride), int(padding)
    hp, wp = h + 2 * p, w + 2 * p
    if kh > hp or kw > wp:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = weight.data.reshape(c_out, c * kh * kw)
    out_data = (cols @ wmat.T).reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2)
    if b is not None:
        out_data = out_data + b.data.reshape(1, c_out, 1, 1)
    out = Tensor(out_data, requires_grad=_track(x, weight) or (b is not None and _track(b)))
    if out.requires_grad:

        def apply():
            g = out.grad
            if g is None:
                return
            gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, c_out)
            if weight.requires_grad:
                accumulate(weight, (gmat.T @ cols).reshape(c_out, c, kh, kw))
            if b is not None and b.requires_grad:
                accumulate(b, g.sum(axis=(0, 2, 3)))
            if x.requires_grad:
                dwin = (gmat @ wmat).reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
                dxp = np.zeros((n, c, hp, wp))
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += dwin[
                            :, :, :, :, i, j
                        ]
                accumulate(x, dxp[:, :, p : p + h, p : p + w])

        record("conv2d", apply, out)
    return out


def upsample_nearest2(x) -> Tensor:
    """Double both spatial axes of an NCHW map by pixel repetition."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"upsample_nearest2 needs a 4D map, got {x.shape}")
    n, c, h, w = x.shape
    out = Tensor(x.data.repeat(2, axis=2).repeat(2, axis=3), requires_grad=_track(x))
    if out.requires_grad:

        def apply():
            g = out.grad
            if g is None:
                return
            accumulate(x, g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))

        record("upsample", apply, out)
    return out


# Operator sugar; kept minimal on purpose.
Tensor.__add__ = lambda self, other: add(self, other)
Tensor.__radd__ = lambda self, other: add(other, self)
Tensor.__sub__ = lambda self, other: sub(self, other)
Tensor.__rsub__ = lambda self, other: sub(other, self)
Tensor.__mul__ = lambda self, other: mul(self, other)
Tensor.__rmul__ = lambda self, other: mul(other, self)
Tensor.__neg__ = lambda self: neg(self)
Tensor.__matmul__ = lambda self, other: matmul(self, other)
Tensor.sum = lambda self, axis=None, keepdims=False: sum(self, axis, keepdims)
Tensor.mean = lambda self, axis=None, keepdims=False: mean(self, axis, keepdims)
Tensor.reshape = lambda self, shape: reshape(self, shape)
