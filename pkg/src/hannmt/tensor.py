"""Dense tensors with reverse-mode automatic differentiation.

Every operation the translation model needs is built from the primitives
here: broadcast arithmetic, batched matmul, softmax, layer norm, dropout,
embedding lookup and a label-smoothed cross entropy. Each op records a
backward closure; ``Tensor.backward`` walks the graph in reverse
topological order and accumulates gradients into the leaves.

``grad_check`` is the independent oracle used by the test suite: it
compares reverse-mode gradients against central differences in double
precision.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense array plus an optional gradient and backward closure.

    Values are immutable once produced by an op; only leaf tensors
    (parameters) are updated in place, between training steps.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        if grad is None:
            grad = np.ones_like(self.data)
        order = _toposort(self)
        _accumulate(self, np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; constants are wrapped as non-grad tensors
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported")
        return mul(self, _as_tensor(1.0 / other, self.dtype))

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class Parameter:
    """A named trainable tensor; names are unique within a model."""

    name: str
    tensor: Tensor


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _toposort(root: Tensor):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    g = _unbroadcast(g, t.data.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def _node(data: np.ndarray, parents, backward) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        out = Tensor(data, requires_grad=True)
        out._parents = tuple(parents)
        out._backward = backward
        return out
    return Tensor(data)


# ---------------------------------------------------------------------------
# elementwise and shape ops


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def bw(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _node(data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def bw(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _node(data, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    def bw(g):
        _accumulate(a, -g)

    return _node(-a.data, (a,), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def bw(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _node(data, (a, b), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; batch dimensions broadcast."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree: {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)

    def bw(g):
        _accumulate(a, np.matmul(g, b.data.swapaxes(-1, -2)))
        _accumulate(b, np.matmul(a.data.swapaxes(-1, -2), g))

    return _node(data, (a, b), bw)


def reshape(a: Tensor, shape) -> Tensor:
    def bw(g):
        _accumulate(a, g.reshape(a.data.shape))

    return _node(a.data.reshape(shape), (a,), bw)


def moveaxis(a: Tensor, src: int, dst: int) -> Tensor:
    def bw(g):
        _accumulate(a, np.moveaxis(g, dst, src))

    return _node(np.moveaxis(a.data, src, dst), (a,), bw)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    data = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        slices = np.moveaxis(g, axis, 0)
        for t, gi in zip(tensors, slices):
            _accumulate(t, gi)

    return _node(data, tuple(tensors), bw)


def slice0(a: Tensor, i: int) -> Tensor:
    """Select index ``i`` along the leading axis, keeping gradient flow."""

    def bw(g):
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            a.grad[i] += g

    return _node(a.data[i], (a,), bw)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.data.shape))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.data.shape))

    return _node(data, (a,), bw)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0.0)

    def bw(g):
        _accumulate(a, g * (a.data > 0))

    return _node(data, (a,), bw)


def sigmoid(a: Tensor) -> Tensor:
    # split by sign to avoid overflow in exp
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bw(g):
        _accumulate(a, g * out * (1.0 - out))

    return _node(out, (a,), bw)


# ---------------------------------------------------------------------------
# neural-net primitives


def affine(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w (+ b). The weight's first axis must match x's last axis."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"affine: {x.shape} is incompatible with weight {w.shape}")
    out = matmul(x, w)
    if b is not None:
        out = add(out, b)
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.data.shape[axis] == 0:
        raise ShapeError(f"softmax over empty axis {axis} of shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    ex = np.exp(shifted)
    y = ex / ex.sum(axis=axis, keepdims=True)

    def bw(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        _accumulate(x, y * (g - inner))

    return _node(y, (x,), bw)


def log_softmax_nd(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Plain-array log softmax for inference-time scoring."""
    shifted = x - x.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis to zero mean / unit variance, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias {gain.shape}/{bias.shape} do not match last axis {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    std = np.sqrt(var + eps)
    xhat = (x.data - mu) / std
    y = xhat * gain.data + bias.data

    def bw(g):
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        _accumulate(x, (dxhat - m1 - xhat * m2) / std)
        red = tuple(range(g.ndim - 1))
        _accumulate(gain, (g * xhat).sum(axis=red))
        _accumulate(bias, g.sum(axis=red))

    return _node(y, (x, gain, bias), bw)


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Zero each element with probability ``rate`` and rescale survivors.

    Identity in eval mode or at rate 0 (the very same tensor is returned).
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(x.data.shape) >= rate).astype(x.data.dtype)
    scale = 1.0 / (1.0 - rate)
    data = x.data * keep * scale

    def bw(g):
        _accumulate(x, g * keep * scale)

    return _node(data, (x,), bw)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup; gradients scatter-add back into the table."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range for table of {table.shape[0]} rows")
    data = table.data[ids]

    def bw(g):
        if table.requires_grad:
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, ids, g)

    return _node(data, (table,), bw)


def _xlogx(v: float) -> float:
    return v * math.log(v) if v > 0.0 else 0.0


def cross_entropy_smoothed(logits: Tensor, targets: np.ndarray, smoothing: float, pad_id: int) -> Tensor:
    """Mean KL(smoothed one-hot || softmax(logits)) over non-pad positions.

    The smoothed target distribution puts 1 - s + s/V on the true token and
    s/V elsewhere. Positions whose target equals ``pad_id`` are excluded.
    """
    if logits.ndim != 2:
        raise ShapeError(f"expected [positions, vocab] logits, got {logits.shape}")
    if not 0.0 <= smoothing < 1.0:
        raise ValueError(f"smoothing must be in [0, 1), got {smoothing}")
    targets = np.asarray(targets)
    v = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise IndexError(f"target id out of range for vocab {v}")
    keep = targets != pad_id
    count = int(keep.sum())
    if count == 0:
        raise ValueError("cross_entropy_smoothed: every position is padding")

    logp = log_softmax_nd(logits.data, axis=-1)
    off = smoothing / v
    on = 1.0 - smoothing + off
    rows = np.arange(targets.shape[0])
    cross = -(off * logp.sum(axis=-1) + (on - off) * logp[rows, targets])
    entropy = _xlogx(on) + (v - 1) * _xlogx(off)
    per_pos = (entropy + cross) * keep
    loss = per_pos.sum() / count

    def bw(g):
        p = np.exp(logp)
        p[rows, targets] -= on - off
        p -= off
        p[~keep] = 0.0
        _accumulate(logits, p * (float(g) / count))

    return _node(np.asarray(loss), (logits,), bw)


# ---------------------------------------------------------------------------
# verification oracle


def grad_check(f, x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference grads.

    ``f`` maps the tensor to a scalar Tensor. Runs in double precision;
    the relative error denominator is max(|a|, |b|, 1e-8) per element.
    """
    if x.data.dtype != np.float64:
        raise ValueError("grad_check requires a float64 tensor")
    if not x.requires_grad:
        raise ValueError("grad_check requires requires_grad=True on x")
    x.grad = None
    out = f(x)
    if out.data.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    if not np.isfinite(out.data).all():
        raise FloatingPointError("non-finite forward value in grad_check")
    out.backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(x).data)
            flat[i] = orig - h
            fm = float(f(x).data)
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise FloatingPointError("non-finite value while perturbing in grad_check")
            nflat[i] = (fp - fm) / (2.0 * h)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float((np.abs(analytic - numeric) / denom).max())
