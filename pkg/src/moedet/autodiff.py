"""Dense tensors with tape-based reverse-mode differentiation.

Only the operations the detector, routers and losses need are provided. Each
primitive computes its forward result with numpy and records a closure that
maps the upstream gradient to one gradient per input.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NumericalError(ArithmeticError):
    """Raised when a value that must be finite is not."""


_local = threading.local()


def get_default_dtype() -> np.dtype:
    return getattr(_local, "dtype", np.dtype(np.float32))


def is_grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily change the dtype used for new tensors (float32 or float64)."""
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    previous = get_default_dtype()
    _local.dtype = dtype
    try:
        yield
    finally:
        _local.dtype = previous


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    previous = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = previous


@contextlib.contextmanager
def record_branches() -> Iterator[list]:
    """Collect the branch masks chosen by piecewise ops (max, min, leaky_relu)."""
    previous = getattr(_local, "branches", None)
    log: list = []
    _local.branches = log
    try:
        yield log
    finally:
        _local.branches = previous


def _note_branch(mask: np.ndarray) -> None:
    log = getattr(_local, "branches", None)
    if log is not None:
        log.append(mask)


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            # float arrays keep their precision; lists and scalars follow the default
            keep = isinstance(data, (np.ndarray, np.floating)) and arr.dtype in (np.float32, np.float64)
            dtype = arr.dtype if keep else get_default_dtype()
        self.data = np.ascontiguousarray(arr, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return elementwise_mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return scale(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return getitem(self, index)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _check_finite(x: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"{op}: non-finite input")


class Tape:
    """Operations reachable from an output, in topological order."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def record(cls, output: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def run(self, output: Tensor, seed: np.ndarray) -> None:
        grads: dict[int, np.ndarray] = {id(output): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``."""
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    Tape.record(loss).run(loss, np.ones_like(loss.data))


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return _result(a.data + a.data.dtype.type(c), (a,), lambda g: (g,))
    _same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    _same_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def _is_channel_weight(a: Tensor, b: Tensor) -> bool:
    return a.data.ndim == 4 and b.shape == (a.shape[1], 1, 1)


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    """Product of equal-shaped tensors, or a (B,h,H,W) map times an (h,1,1) weight."""
    if a.shape == b.shape:
        return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))
    if _is_channel_weight(a, b):
        def grad_fn(g):
            gb = (g * a.data).sum(axis=(0, 2, 3)).reshape(b.shape)
            return g * b.data, gb
        return _result(a.data * b.data, (a, b), grad_fn)
    raise ShapeError(f"mul: cannot broadcast {b.shape} against {a.shape}")


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "div")
    out = a.data / b.data
    return _result(out, (a, b), lambda g: (g / b.data, -g * out / b.data))


def maximum(a, b) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        mask = a.data >= b
        _note_branch(mask)
        return _result(np.where(mask, a.data, a.data.dtype.type(b)), (a,), lambda g: (g * mask,))
    _same_shape(a, b, "maximum")
    mask = a.data >= b.data
    _note_branch(mask)
    return _result(np.where(mask, a.data, b.data), (a, b), lambda g: (g * mask, g * ~mask))


def minimum(a, b) -> Tensor:
    """Elementwise min; ties send the gradient to ``a``."""
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        mask = a.data <= b
        _note_branch(mask)
        return _result(np.where(mask, a.data, a.data.dtype.type(b)), (a,), lambda g: (g * mask,))
    _same_shape(a, b, "minimum")
    mask = a.data <= b.data
    _note_branch(mask)
    return _result(np.where(mask, a.data, b.data), (a, b), lambda g: (g * mask, g * ~mask))


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    pos = x.data > 0
    _note_branch(pos)
    slope = x.data.dtype.type(slope)
    out = np.where(pos, x.data, x.data * slope)
    return _result(out, (x,), lambda g: (np.where(pos, g, g * slope),))


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise binary cross-entropy of sigmoid(logits) against constant targets."""
    x = logits.data
    t = np.asarray(targets, dtype=x.dtype)
    if t.shape != x.shape:
        raise ShapeError(f"bce_with_logits: targets {t.shape} vs logits {x.shape}")
    out = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))

    def grad_fn(g):
        sig = 0.5 * (1.0 + np.tanh(0.5 * x))
        return (g * (sig - t),)

    return _result(out, (logits,), grad_fn)


# ------------------------------------------------------------------ reductions


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    out = np.asarray(x.data.sum(axis=axis))
    shape = x.shape

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _result(out, (x,), grad_fn)


def mean(x: Tensor, axis=None) -> Tensor:
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum(x, axis=axis), 1.0 / count)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool expects (B,C,H,W), got {x.shape}")
    B, C, H, W = x.shape
    out = x.data.mean(axis=(2, 3))

    def grad_fn(g):
        return (np.broadcast_to((g / (H * W))[:, :, None, None], x.shape).copy(),)

    return _result(out, (x,), grad_fn)


# ------------------------------------------------------------------ structural


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def getitem(x: Tensor, index) -> Tensor:
    out = np.array(x.data[index])

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return _result(out, (x,), grad_fn)


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate (B,c,H,W) tensors along the channel axis, in list order."""
    if not parts:
        raise ShapeError("concat_channels needs at least one part")
    ref = parts[0].shape
    for p in parts:
        if p.data.ndim != 4 or p.shape[0] != ref[0] or p.shape[2:] != ref[2:]:
            raise ShapeError(f"concat_channels: {p.shape} incompatible with {ref}")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])
    out = np.concatenate([p.data for p in parts], axis=1)

    def grad_fn(g):
        return tuple(g[:, bounds[k]:bounds[k + 1]] for k in range(len(parts)))

    return _result(out, tuple(parts), grad_fn)


# ---------------------------------------------------------------- normalizers


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_finite(x.data, "softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), grad_fn)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_finite(x.data, "log_softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def grad_fn(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), grad_fn)


# ------------------------------------------------------------------ layers


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} vs weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} vs weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def grad_fn(g):
        grads = [g @ weight.data, g.T @ x.data]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, grad_fn)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation over (B,Cin,H,W) with a (Cout,Cin,kh,kw) kernel."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and kernel, got {x.shape}, {kernel.shape}")
    B, C, H, W = x.shape
    O, Ci, kh, kw = kernel.shape
    if C != Ci:
        raise ShapeError(f"conv2d: input has {C} channels, kernel expects {Ci}")
    if stride < 1 or padding < 0:
        raise ValueError("conv2d: stride must be >= 1 and padding >= 0")
    if bias is not None and bias.shape != (O,):
        raise ShapeError(f"conv2d: bias {bias.shape} vs {O} output channels")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    Hp, Wp = xp.shape[2:]
    if kh > Hp or kw > Wp:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {Hp}x{Wp}")
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    out = np.tensordot(windows, kernel.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def grad_fn(g):
        gk = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        cols = np.tensordot(g, kernel.data, axes=([1], [0]))  # B,Ho,Wo,C,kh,kw
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += \
                    cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
        grads = [gx, gk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _result(out, parents, grad_fn)


def weighted_sum(parts: Sequence[Tensor], weights: Tensor) -> Tensor:
    """sum_e weights[:, e] * parts[e], the weights broadcast over non-batch axes."""
    if not parts:
        raise ShapeError("weighted_sum needs at least one part")
    ref = parts[0].shape
    for p in parts:
        if p.shape != ref:
            raise ShapeError(f"weighted_sum: part shapes {p.shape} and {ref} differ")
    if weights.shape != (ref[0], len(parts)):
        raise ShapeError(f"weighted_sum: weights {weights.shape} vs {len(parts)} parts of batch {ref[0]}")
    extra = (1,) * (len(ref) - 1)
    cols = [weights.data[:, e].reshape((ref[0],) + extra) for e in range(len(parts))]
    out = cols[0] * parts[0].data
    for e in range(1, len(parts)):
        out = out + cols[e] * parts[e].data
    axes = tuple(range(1, len(ref)))

    def grad_fn(g):
        gw = np.stack([(g * p.data).sum(axis=axes) for p in parts], axis=1)
        return [g * c for c in cols] + [gw]

    return _result(out, tuple(parts) + (weights,), grad_fn)


def group_norm(x: Tensor, groups: int, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample normalisation over channel groups, then a per-channel affine map."""
    if x.data.ndim != 4 or x.shape[1] % groups:
        raise ShapeError(f"group_norm: {x.shape} not divisible into {groups} groups")
    B, C, H, W = x.shape
    if weight.shape != (C,) or bias.shape != (C,):
        raise ShapeError(f"group_norm: affine parameters must have shape ({C},)")
    xg = x.data.reshape(B, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    inv_std = 1.0 / np.sqrt(xg.var(axis=2, keepdims=True) + eps)
    xhat = ((xg - mu) * inv_std).reshape(x.shape)
    out = xhat * weight.data[None, :, None, None] + bias.data[None, :, None, None]

    def grad_fn(g):
        gw = (g * xhat).sum(axis=(0, 2, 3))
        gb = g.sum(axis=(0, 2, 3))
        gxh = (g * weight.data[None, :, None, None]).reshape(B, groups, -1)
        xh = xhat.reshape(B, groups, -1)
        gx = inv_std * (gxh - gxh.mean(axis=2, keepdims=True) - xh * (gxh * xh).mean(axis=2, keepdims=True))
        return gx.reshape(x.shape), gw, gb

    return _result(out, (x, weight, bias), grad_fn)
