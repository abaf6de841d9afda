"""Dense tensors with define-by-run reverse-mode automatic differentiation.

The engine is deliberately small: numpy arrays carry the values, and every
differentiable operation records a graph node holding its parent tensors and
a closure that maps the output gradient to parent gradients.  The graph is
rebuilt on every forward pass; ``backward`` replays the recorded nodes once,
in reverse execution order, and accumulates gradients additively (so calling
it twice without clearing doubles every gradient).

All arithmetic is float64 by default; float32 is available by constructing
tensors with an explicit dtype.  Any operation whose output contains a NaN
or Inf raises :class:`NonFiniteError` -- non-finite values are a contract
violation, not a state the rest of the model is prepared to handle.
"""

from __future__ import annotations

import itertools
from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are inconsistent; the message names the offending axis."""


class DomainError(ValueError):
    """An input value lies outside an operation's mathematical domain."""


class NonFiniteError(FloatingPointError):
    """A value or gradient came out NaN/Inf."""


_SEQ = itertools.count()

_FLOAT_DTYPES = (np.float32, np.float64)


def _ensure_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {what}")


class _Node:
    """One executed operation: parents plus the gradient closure."""

    __slots__ = ("parents", "backward_fn", "seq")

    def __init__(self, parents, backward_fn):
        self.parents = parents
        self.backward_fn = backward_fn
        self.seq = next(_SEQ)


class Tensor:
    """N-dimensional array with optional gradient storage.

    ``data`` is a row-major numpy array (float64 or float32); ``grad`` is
    ``None`` until :func:`backward` deposits a gradient of the same shape.
    """

    __slots__ = ("data", "grad", "requires_grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        _ensure_finite(arr, "tensor values")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.node: Optional[_Node] = None

    # -- introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return negate(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def backward(self) -> None:
        backward(self)


def _as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float64
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap an op result, recording a graph node if any parent needs grad."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = _Node(tuple(parents), backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient over the axes numpy broadcasting expanded."""
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- graph traversal ------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad tensor reachable from ``loss``.

    Gradients accumulate: a second call without clearing doubles them.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.shape}")
    if loss.node is None and not loss.requires_grad:
        return

    # Reachable subgraph; define-by-run sequence numbers give a topological order.
    interior = []
    seen = {id(loss): loss}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t.node is None:
            continue
        interior.append(t)
        for p in t.node.parents:
            if id(p) not in seen:
                seen[id(p)] = p
                stack.append(p)
    interior.sort(key=lambda t: t.node.seq, reverse=True)

    grads = {id(loss): np.ones_like(loss.data)}
    for t in interior:
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.requires_grad:
            _deposit(t, g)
        for p, pg in zip(t.node.parents, t.node.backward_fn(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    # Whatever is left belongs to leaves.
    for key, g in grads.items():
        _deposit(seen[key], g)


def _deposit(t: Tensor, g: np.ndarray) -> None:
    _ensure_finite(g, "gradient")
    if t.grad is None:
        t.grad = g.astype(t.dtype, copy=True)
    else:
        t.grad = t.grad + g


# -- elementwise arithmetic ------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    out = a.data + b.data

    def bwd(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _make(out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    out = a.data - b.data

    def bwd(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return _make(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    out = a.data * b.data

    def bwd(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _make(out, (a, b), bwd)


# -- unary functions --------------------------------------------------------


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Split by sign so the exponent argument is never positive.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),))


def elu(x: Tensor) -> Tensor:
    neg = x.data < 0
    y = np.where(neg, np.expm1(x.data), x.data)
    slope = np.where(neg, np.exp(x.data), 1.0)
    return _make(y, (x,), lambda g: (g * slope,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise DomainError("log requires strictly positive values")
    y = np.log(x.data)
    return _make(y, (x,), lambda g: (g / x.data,))


def negate(x: Tensor) -> Tensor:
    return _make(-x.data, (x,), lambda g: (-g,))


def softplus(x: Tensor) -> Tensor:
    y = np.logaddexp(0.0, x.data)
    s = _sigmoid(x.data)
    return _make(y, (x,), lambda g: (g * s,))


_UNARY = {
    "sigmoid": sigmoid,
    "tanh": tanh,
    "elu": elu,
    "exp": exp,
    "log": log,
    "negate": negate,
}


def apply_unary(x: Tensor, fn: str) -> Tensor:
    """Apply one of {sigmoid, tanh, elu, exp, log, negate} elementwise."""
    try:
        f = _UNARY[fn]
    except KeyError:
        raise ValueError(f"unknown unary function {fn!r}") from None
    return f(x)


def maximum(x: Tensor, floor: float) -> Tensor:
    """Elementwise max with a constant; gradient passes where x >= floor."""
    keep = x.data >= floor
    y = np.maximum(x.data, floor)
    return _make(y, (x,), lambda g: (g * keep,))


def where(cond: np.ndarray, a, b) -> Tensor:
    """Select elementwise by a constant boolean mask (not differentiated)."""
    cond = np.asarray(cond, dtype=bool)
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    out = np.where(cond, a.data, b.data)

    def bwd(g):
        return (_unbroadcast(g * cond, a.shape) if a.requires_grad else None,
                _unbroadcast(g * ~cond, b.shape) if b.requires_grad else None)

    return _make(out, (a, b), bwd)


# -- reductions and shape ops ------------------------------------------------


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    y = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(y, (x,), bwd)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(x: Tensor, shape) -> Tensor:
    y = x.data.reshape(shape)
    return _make(y, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    y = x.data.transpose(axes)
    return _make(y, (x,), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    y = np.concatenate([t.data for t in tensors], axis=axis)
    extents = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + extents)

    def bwd(g):
        pieces = []
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                pieces.append(g[tuple(idx)])
            else:
                pieces.append(None)
        return tuple(pieces)

    return _make(y, tensors, bwd)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` entries along ``axis``."""
    if not (0 <= start and start + length <= x.shape[axis]):
        raise ShapeError(f"narrow range [{start}, {start + length}) exceeds axis {axis} "
                         f"of extent {x.shape[axis]}")
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    y = x.data[idx]

    def bwd(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return _make(y, (x,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; 2-D or batched 3-D with matching batch extents."""
    if a.ndim != b.ndim or a.ndim not in (2, 3):
        raise ShapeError(f"matmul requires both operands 2-D or both 3-D, got "
                         f"{a.ndim}-D and {b.ndim}-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ on contraction axis: "
                         f"{a.shape[-1]} vs {b.shape[-2]}")
    y = np.matmul(a.data, b.data)

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (ga, gb)

    return _make(y, (a, b), bwd)


# -- structured ops ----------------------------------------------------------


def _corr2d(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Valid cross-correlation of [N,C,H,W] with [O,C,kH,kW] -> [N,O,H',W']."""
    windows = np.lib.stride_tricks.sliding_window_view(x, k.shape[2:], axis=(2, 3))
    # windows: [N,C,H',W',kH,kW]; contract C,kH,kW against the kernel.
    out = np.tensordot(windows, k, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor], pad) -> Tensor:
    """Stride-1 cross-correlation with explicit (top, bottom, left, right) padding."""
    top, bottom, left, right = (int(p) for p in pad)
    if min(top, bottom, left, right) < 0:
        raise ValueError(f"negative padding {pad}")
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be 4-D [N,C,H,W], got {x.ndim}-D")
    if kernel.ndim != 4:
        raise ShapeError(f"conv2d kernel must be 4-D [O,C,kH,kW], got {kernel.ndim}-D")
    n, c, h, w = x.shape
    co, ci, kh, kw = kernel.shape
    if ci != c:
        raise ShapeError(f"conv2d channel mismatch on axis 1: input has {c}, kernel expects {ci}")
    if h + top + bottom < kh:
        raise ShapeError(f"conv2d padded height {h + top + bottom} smaller than kernel "
                         f"height {kh} on axis 2")
    if w + left + right < kw:
        raise ShapeError(f"conv2d padded width {w + left + right} smaller than kernel "
                         f"width {kw} on axis 3")
    if bias is not None and bias.shape != (co,):
        raise ShapeError(f"conv2d bias shape {bias.shape} does not match {co} output "
                         f"channels on axis 0")

    xp = np.pad(x.data, ((0, 0), (0, 0), (top, bottom), (left, right)))
    y = _corr2d(xp, kernel.data)
    if bias is not None:
        y = y + bias.data[:, None, None]

    def bwd(g):
        gx = gk = gb = None
        if x.requires_grad:
            kflip = kernel.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            gp = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
            gx_full = _corr2d(gp, kflip)
            gx = gx_full[:, :, top:top + h, left:left + w]
        if kernel.requires_grad:
            windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
            # [N,C,H',W',kH,kW] x [N,O,H',W'] -> [O,C,kH,kW]
            gk = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gk) if bias is None else (gx, gk, gb)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(y, parents, bwd)


def pointwise_linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Per-location affine map over channels: [N,C,H,W] x [O,C] -> [N,O,H,W]."""
    if x.ndim != 4:
        raise ShapeError(f"pointwise_linear input must be 4-D, got {x.ndim}-D")
    if weight.ndim != 2 or weight.shape[1] != x.shape[1]:
        raise ShapeError(f"pointwise_linear weight {weight.shape} does not match "
                         f"{x.shape[1]} input channels on axis 1")
    co = weight.shape[0]
    if bias is not None and bias.shape != (co,):
        raise ShapeError(f"pointwise_linear bias shape {bias.shape} does not match "
                         f"{co} output channels on axis 0")
    y = np.tensordot(weight.data, x.data, axes=([1], [1])).transpose(1, 0, 2, 3)
    if bias is not None:
        y = y + bias.data[:, None, None]

    def bwd(g):
        gx = gw = gb = None
        if x.requires_grad:
            gx = np.tensordot(weight.data.T, g, axes=([1], [1])).transpose(1, 0, 2, 3)
        if weight.requires_grad:
            gw = np.tensordot(g, x.data, axes=([0, 2, 3], [0, 2, 3]))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(np.ascontiguousarray(y), parents, bwd)


def masked_softmax(logits: Tensor, mask: np.ndarray) -> Tensor:
    """Softmax over the last axis restricted to unmasked positions.

    Masked positions receive probability exactly 0.  Rows with no unmasked
    position return all zeros (the empty-context convention).
    """
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), logits.shape)
    z = np.where(mask, logits.data, -np.inf)
    rowmax = z.max(axis=-1, keepdims=True)
    rowmax = np.where(np.isfinite(rowmax), rowmax, 0.0)
    e = np.exp(z - rowmax)
    denom = e.sum(axis=-1, keepdims=True)
    y = np.where(denom > 0, e / np.where(denom > 0, denom, 1.0), 0.0)

    def bwd(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - inner),)

    return _make(y, (logits,), bwd)


def shift2d(x: Tensor, down: int = 0, right: int = 0) -> Tensor:
    """Move content down/right, zero-filling vacated rows/columns."""
    if x.ndim < 2:
        raise ShapeError(f"shift2d needs at least 2 dims, got {x.ndim}")
    h, w = x.shape[-2], x.shape[-1]
    if not (0 <= down < h):
        raise ValueError(f"down shift {down} outside [0, {h})")
    if not (0 <= right < w):
        raise ValueError(f"right shift {right} outside [0, {w})")
    y = np.zeros_like(x.data)
    y[..., down:, right:] = x.data[..., :h - down, :w - right]

    def bwd(g):
        gx = np.zeros_like(g)
        gx[..., :h - down, :w - right] = g[..., down:, right:]
        return (gx,)

    return _make(y, (x,), bwd)


def dropout(x: Tensor, rate: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout: zero with probability ``rate``, scale survivors by 1/(1-rate)."""
    if not (0.0 <= rate < 1.0):
        raise ValueError(f"dropout rate {rate} outside [0, 1)")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode requires an rng")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    keep = keep.astype(x.dtype)
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


# -- composites ---------------------------------------------------------------


def logsumexp(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """log(sum(exp(x))) along an axis, max-shifted for stability."""
    m = x.data.max(axis=axis, keepdims=True)
    shifted = sub(x, Tensor(m, dtype=x.dtype))
    out = add(log(tsum(exp(shifted), axis=axis, keepdims=True)), Tensor(m, dtype=x.dtype))
    if not keepdims:
        out = reshape(out, np.squeeze(out.data, axis=axis).shape)
    return out


def log_softmax(x: Tensor, axis: int) -> Tensor:
    return sub(x, logsumexp(x, axis=axis, keepdims=True))
