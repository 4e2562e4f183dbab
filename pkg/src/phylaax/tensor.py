"""Minimal float64 tensor with define-by-run reverse-mode differentiation.

Only the operations needed by the detector are provided. Every result records
its parents and a closure mapping the upstream gradient to parent gradients;
``Tensor.backward`` replays those closures in exact reverse creation order.

Gradient mode: leaf tensors *accumulate* across repeated ``backward`` calls
(call ``zero_grad`` between optimisation steps). Intermediate gradients are
released after each pass.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit, log_expit

_ids = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand extents are incompatible."""


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (results never require grad)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "_id")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _op: str = "leaf"):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward: Callable | None = None
        self.op = _op
        self._id = next(_ids)

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- autodiff -----------------------------------------------------------
    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("loss does not depend on any tensor requiring grad")
        order = graph_order(self)
        for node in order:
            if node._parents:
                node.grad = None
        seed = np.ones_like(self.data)
        self.grad = seed if self.grad is None or self._parents else self.grad + seed
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            pgrads = node._backward(node.grad)
            for parent, g in zip(node._parents, pgrads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.array(g, dtype=np.float64, copy=True)
                else:
                    parent.grad = parent.grad + g
            node.grad = None

    # -- operator sugar --------------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def graph_order(loss: Tensor) -> list[Tensor]:
    """All nodes reachable from ``loss`` in forward (creation) order."""
    seen: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen[id(node)] = node
        stack.extend(node._parents)
    return sorted(seen.values(), key=lambda n: n._id)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, _op=op)
    out = Tensor(data, requires_grad=True, _parents=tuple(parents), _op=op)
    out._backward = backward
    return out


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape))

    return _result(out, (a, b), bw, "div")


def scale(a: Tensor, c: float) -> Tensor:
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def power(a: Tensor, p: float) -> Tensor:
    return _result(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a: Tensor) -> Tensor:
    out = expit(a.data)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def log_sigmoid(a: Tensor) -> Tensor:
    """log(sigmoid(x)) without overflow."""
    out = log_expit(a.data)
    return _result(out, (a,), lambda g: (g * expit(-a.data),), "log_sigmoid")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only where the input is inside the range."""
    inside = (a.data >= lo) & (a.data <= hi)
    return _result(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def dropout(a: Tensor, p: float, rng, training: bool) -> Tensor:
    """Inverted dropout; exact identity when not training or p == 0.

    ``rng`` is one generator, or a sequence with one generator per leading row
    so that a row's mask does not depend on which other rows share the batch.
    """
    if not training or p == 0.0:
        return a
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout p must lie in [0, 1), got {p}")
    if isinstance(rng, np.random.Generator):
        u = rng.random(a.shape)
    else:
        if len(rng) != a.shape[0]:
            raise ShapeError(f"{len(rng)} generators for {a.shape[0]} rows")
        u = np.stack([g.random(a.shape[1:]) for g in rng])
    keep = (u >= p) / (1.0 - p)
    return _result(a.data * keep, (a,), lambda g: (g * keep,), "dropout")


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _result(out, (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(sum_(a, axis, keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _result(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                   lambda g: (g.transpose(inv),), "transpose")


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, tuple(axes))


def getitem(a: Tensor, idx) -> Tensor:
    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _result(np.array(a.data[idx]), (a,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _result(np.stack([t.data for t in tensors], axis=axis), tensors, bw, "stack")


# ---------------------------------------------------------------------------
# linear algebra and normalisation
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product over the trailing two axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return _result(out, (a, b), bw, "matmul")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), bw, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply per-feature gain and bias."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    n = x.shape[-1]

    def bw(g):
        gx_hat = g * gain.data
        gx = inv / n * (n * gx_hat - gx_hat.sum(-1, keepdims=True)
                        - xhat * (gx_hat * xhat).sum(-1, keepdims=True))
        return (gx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape))

    return _result(out, (x, gain, bias), bw, "layer_norm")


# ---------------------------------------------------------------------------
# convolution and pooling
# ---------------------------------------------------------------------------

def _im2col(xp: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """xp[N,C,H,W] -> columns [N, C*kh*kw, Ho*Wo] for a valid stride-1 window."""
    n, c, h, w = xp.shape
    ho, wo = h - kh + 1, w - kw + 1
    cols = np.empty((n, c, kh, kw, ho, wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + ho, j:j + wo]
    return cols.reshape(n, c * kh * kw, ho * wo)


def _col2im(gcols: np.ndarray, shape: tuple, kh: int, kw: int) -> np.ndarray:
    """Adjoint of ``_im2col``: scatter-add columns back onto the padded input."""
    n, c, h, w = shape
    ho, wo = h - kh + 1, w - kw + 1
    g6 = gcols.reshape(n, c, kh, kw, ho, wo)
    out = np.zeros(shape)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + ho, j:j + wo] += g6[:, :, i, j]
    return out


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, padding: int = 0) -> Tensor:
    """Stride-1 2-d convolution with symmetric zero padding.

    x: [N, C, H, W]; w: [O, C, kh, kw]; b: [O].
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape[1]}, weight {w.shape[1]}")
    o, _, kh, kw = w.shape
    p = padding
    if kh > x.shape[2] + 2 * p or kw > x.shape[3] + 2 * p:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {x.shape[2:]} (+{p})")
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    n = xp.shape[0]
    ho, wo = xp.shape[2] - kh + 1, xp.shape[3] - kw + 1
    # window copies move whole image rows, and the product lands directly in NCHW order
    cols = _im2col(xp, kh, kw)
    wmat = w.data.reshape(o, -1)
    out = np.matmul(wmat, cols).reshape(n, o, ho, wo)
    if b is not None:
        out += b.data.reshape(1, -1, 1, 1)

    def bw(g):
        gm = g.reshape(n, o, ho * wo)
        gw = np.einsum("nop,nkp->ok", gm, cols, optimize=True).reshape(w.shape)
        gx = None
        if x.requires_grad:
            gxp = _col2im(np.matmul(wmat.T, gm), xp.shape, kh, kw)
            gx = gxp[:, :, p:p + x.shape[2], p:p + x.shape[3]] if p else gxp
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, bw, "conv2d")


def avg_pool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping k x k mean pooling (stride k); H and W must divide by k."""
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"avg_pool2d: spatial extents {h}x{w} not divisible by {k}")
    out = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def bw(g):
        return (np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k),)

    return _result(out, (x,), bw, "avg_pool2d")


def conv1d_causal(x: Tensor, w: Tensor, b: Tensor | None = None, dilation: int = 1) -> Tensor:
    """Causal dilated 1-d convolution: output[t] sees only inputs at times <= t.

    x: [N, C, T]; w: [O, C, k]; b: [O]. Output length equals T.
    """
    if x.ndim != 3 or w.ndim != 3 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv1d_causal shape mismatch: {x.shape} with {w.shape}")
    k = w.shape[2]
    span = (k - 1) * dilation
    t_len = x.shape[2]
    xp = np.pad(x.data, ((0, 0), (0, 0), (span, 0)))
    win = sliding_window_view(xp, span + 1, axis=2)[..., ::dilation]  # N,C,T,k
    out = np.ascontiguousarray(np.tensordot(win, w.data, axes=([1, 3], [1, 2])).transpose(0, 2, 1))
    if b is not None:
        out += b.data.reshape(1, -1, 1)

    def bw(g):
        gw = np.tensordot(g, win, axes=([0, 2], [0, 2]))
        gxp = np.zeros_like(xp)
        for j in range(k):
            s = j * dilation
            gxp[:, :, s:s + t_len] += np.einsum("not,oc->nct", g, w.data[:, :, j])
        gb = g.sum(axis=(0, 2)) if b is not None else None
        return (gxp[:, :, span:], gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, bw, "conv1d_causal")


def receptive_field(kernel: int, dilations: Iterable[int]) -> int:
    """Receptive field of a stack of causal dilated convolutions."""
    return 1 + (kernel - 1) * sum(dilations)
