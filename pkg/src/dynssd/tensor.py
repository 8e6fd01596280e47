"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations are recorded only while a :class:`Tape` is active (``with Tape()
as tape:``) and at least one input requires a gradient. Outside a tape every
op is a plain forward computation, which is how inference runs.

There is no implicit broadcasting: elementwise ops require equal shapes and
raise :class:`ShapeError` otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Operand shapes are incompatible with an operation."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim and 0 in arr.shape:
            raise ShapeError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (Tensor, np.ndarray)):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


@dataclass
class _Record:
    inputs: tuple
    output: Tensor
    backward: Callable


@dataclass
class Tape:
    """Ordered log of differentiable operations."""

    records: list = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.records)


_ACTIVE: list[Tape] = []


def _emit(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    tracked = bool(_ACTIVE) and any(t.requires_grad for t in inputs)
    out.requires_grad = tracked
    if tracked:
        _ACTIVE[-1].records.append(_Record(tuple(inputs), out, backward))
    return out


def _accumulate(store: dict, t: Tensor, g: np.ndarray) -> None:
    key = id(t)
    if key in store:
        store[key] = store[key] + g
    else:
        store[key] = g


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``.grad`` of every requires-grad tensor reachable from ``loss``.

    Gradients add onto any existing ``.grad``; call ``zero_grad`` between steps.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    pending = {id(loss): np.ones_like(loss.data)}
    holders = {id(loss): loss}
    for rec in reversed(tape.records):
        g = pending.pop(id(rec.output), None)
        if g is None:
            continue
        holders.pop(id(rec.output), None)
        out = rec.output
        out.grad = g.copy() if out.grad is None else out.grad + g
        for t, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            _accumulate(pending, t, gi)
            holders[id(t)] = t
    # Whatever is left belongs to leaves (tensors not produced on this tape).
    for key, g in pending.items():
        t = holders[key]
        t.grad = g.copy() if t.grad is None else t.grad + g


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# --- elementwise -----------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "add")
    return _emit(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "sub")
    return _emit(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product; ``b`` may be a Tensor or a constant array of the same shape."""
    if not isinstance(b, Tensor):
        const = np.asarray(b, dtype=np.float64)
        if const.shape != a.shape:
            raise ShapeError(f"mul: shape mismatch {a.shape} vs {const.shape}")
        return _emit(a.data * const, (a,), lambda g: (g * const,))
    _same_shape(a, b, "mul")
    return _emit(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit(a.data * c, (a,), lambda g: (g * c,))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    factor = np.where(x.data > 0, 1.0, slope)
    return _emit(x.data * factor, (x,), lambda g: (g * factor,))


def relu(x: Tensor) -> Tensor:
    mask = (x.data > 0).astype(np.float64)
    return _emit(x.data * mask, (x,), lambda g: (g * mask,))


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _emit(s, (x,), lambda g: (g * s * (1.0 - s),))


def clip(x: Tensor, lo: float = 0.0, hi: float = 1.0) -> Tensor:
    inside = ((x.data >= lo) & (x.data <= hi)).astype(np.float64)
    return _emit(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


# --- reductions and shape ----------------------------------------------------


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return _emit(np.array(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),))


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return _emit(np.array(x.data.mean()), (x,), lambda g: (np.full(shape, float(g) / n),))


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    old = x.shape
    return _emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.data.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for rank {x.data.ndim}")
    inverse = tuple(np.argsort(axes))
    return _emit(
        np.ascontiguousarray(x.data.transpose(axes)),
        (x,),
        lambda g: (np.ascontiguousarray(g.transpose(inverse)),),
    )


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            d != r for i, (d, r) in enumerate(zip(t.shape, ref)) if i != axis
        ):
            raise ShapeError(f"concat: shape {t.shape} incompatible with {ref} along axis {axis}")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _emit(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, bounds, axis=axis)),
    )


# --- layers -------------------------------------------------------------------


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if x.data.ndim != 2 or weight.data.ndim != 2 or bias.data.ndim != 1:
        raise ShapeError(
            f"dense: expected input[N,D], weight[D,K], bias[K]; got {x.shape}, {weight.shape}, {bias.shape}"
        )
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(f"dense: input dim D={x.shape[1]} != weight rows {weight.shape[0]}")
    if bias.shape[0] != weight.shape[1]:
        raise ShapeError(f"dense: bias length {bias.shape[0]} != weight cols K={weight.shape[1]}")
    out = x.data @ weight.data + bias.data

    def back(g):
        return g @ weight.data.T, x.data.T @ g, g.sum(axis=0)

    return _emit(out, (x, weight, bias), back)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an NCHW batch with an (C_out, C_in, kH, kW) kernel."""
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d: input must be rank 4 [N,C,H,W], got {x.shape}")
    if kernel.data.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be rank 4 [C_out,C_in,kH,kW], got {kernel.shape}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: need stride >= 1 and padding >= 0, got {stride}, {padding}")
    n, c, h, w = x.shape
    cout, cin, kh, kw = kernel.shape
    if cin != c:
        raise ShapeError(f"conv2d: C_in mismatch, input has {c} channels, kernel expects {cin}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias must have shape ({cout},), got {bias.shape}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if kh > h + 2 * padding or ho < 1:
        raise ShapeError(f"conv2d: output height would be < 1 (H={h}, kH={kh}, padding={padding})")
    if kw > w + 2 * padding or wo < 1:
        raise ShapeError(f"conv2d: output width would be < 1 (W={w}, kW={kw}, padding={padding})")

    xd = np.ascontiguousarray(x.data)
    cols = kernels.im2col(xd, kh, kw, stride, padding)
    wmat = kernel.data.reshape(cout, -1)
    out = cols @ wmat.T + bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))

    def back(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gk = (gm.T @ cols).reshape(kernel.shape)
        gb = gm.sum(axis=0)
        gx = None
        if x.requires_grad:
            gx = kernels.col2im(np.ascontiguousarray(gm @ wmat), n, c, h, w, kh, kw, stride, padding)
        return gx, gk, gb

    return _emit(out, (x, kernel, bias), back)


def upsample_nearest2x(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"upsample_nearest2x: input must be rank 4 [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    return _emit(out, (x,), lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),))


def resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Differentiable Catmull-Rom resize of an NCHW batch (unclamped)."""
    if x.data.ndim != 4:
        raise ShapeError(f"resize: input must be rank 4 [N,C,H,W], got {x.shape}")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"resize: output size must be positive, got {out_h}x{out_w}")
    my = kernels.resize_matrix(x.shape[2], out_h)
    mx = kernels.resize_matrix(x.shape[3], out_w)
    out = my @ x.data @ mx.T
    return _emit(out, (x,), lambda g: (my.T @ g @ mx,))


# --- losses -------------------------------------------------------------------


def _reduce(per_elem: Tensor, reduction: str) -> Tensor:
    if reduction == "mean":
        return mean(per_elem)
    if reduction == "sum":
        return sum(per_elem)
    if reduction == "none":
        return per_elem
    raise ValueError(f"unknown reduction {reduction!r}")


def bce_with_logits(logits: Tensor, targets, reduction: str = "mean") -> Tensor:
    t = targets.data if isinstance(targets, Tensor) else np.asarray(targets, dtype=np.float64)
    if t.shape != logits.shape:
        raise ShapeError(f"bce_with_logits: shape mismatch {logits.shape} vs {t.shape}")
    if t.size and (t.min() < 0.0 or t.max() > 1.0):
        raise ValueError("bce_with_logits: targets must lie in [0, 1]")
    z = logits.data
    per = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    s = _sigmoid(z)
    elem = _emit(per, (logits,), lambda g: (g * (s - t),))
    return _reduce(elem, reduction)


def mse(a: Tensor, b, reduction: str = "mean") -> Tensor:
    b = _as_tensor(b)
    _same_shape(a, b, "mse")
    d = a.data - b.data
    elem = _emit(d * d, (a, b), lambda g: (2.0 * d * g, -2.0 * d * g))
    return _reduce(elem, reduction)


def smooth_l1(a: Tensor, b, reduction: str = "mean") -> Tensor:
    b = _as_tensor(b)
    _same_shape(a, b, "smooth_l1")
    d = a.data - b.data
    ad = np.abs(d)
    small = ad < 1.0
    per = np.where(small, 0.5 * d * d, ad - 0.5)
    slope = np.where(small, d, np.sign(d))
    elem = _emit(per, (a, b), lambda g: (g * slope, -g * slope))
    return _reduce(elem, reduction)
