"""Minimal dense-tensor engine with reverse-mode differentiation.

Values are float64 numpy arrays; graphs are built eagerly per example and
freed with it.  Gradients accumulate into ``.grad`` on every node that
requires them, so calling :func:`backward` twice without zeroing doubles
leaf gradients.  Dynamic-programming losses elsewhere in the package build
on the same node type via :func:`from_op` with hand-derived backward rules.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class Tensor:
    """A dense array node in an eager computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g) -> None:
        if self.grad is None:
            # copy: g may alias a consumer's grad buffer
            self.grad = np.array(g, dtype=np.float64)
            if self.grad.shape != self.data.shape:
                self.grad = np.broadcast_to(self.grad, self.data.shape).copy()
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def param(data, rng=None, shape=None, scale=None) -> Tensor:
    """Trainable tensor; with ``rng`` and ``shape``, Gaussian init."""
    if rng is not None:
        if shape is None:
            raise ValueError("shape required for random init")
        n = int(np.prod(shape))
        if scale is None:
            scale = 1.0 / np.sqrt(shape[-1] if len(shape) > 1 else shape[0])
        data = rng.normal(n, std=scale).reshape(shape)
    return Tensor(data, requires_grad=True)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def from_op(data: np.ndarray, parents: Sequence[Tensor],
            backward: Callable[[Tensor], None]) -> Tensor:
    """Create a graph node with a custom backward rule.

    ``backward`` receives the output node and must distribute
    ``out.grad`` into each requiring parent via ``Tensor._accumulate``.
    """
    out = Tensor(data)
    parents = tuple(parents)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = lambda: backward(out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting expanded."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, dim in enumerate(shape):
        if dim == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def bw(out: Tensor):
        if a.requires_grad:
            a._accumulate(_unbroadcast(out.grad, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(out.grad, b.data.shape))

    return from_op(out_data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def bw(out: Tensor):
        if a.requires_grad:
            a._accumulate(_unbroadcast(out.grad * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(out.grad * a.data, b.data.shape))

    return from_op(out_data, (a, b), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must have rank >= 2")
    out_data = np.matmul(a.data, b.data)

    def bw(out: Tensor):
        if a.requires_grad:
            ga = np.matmul(out.grad, np.swapaxes(b.data, -1, -2))
            a._accumulate(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), out.grad)
            b._accumulate(_unbroadcast(gb, b.data.shape))

    return from_op(out_data, (a, b), bw)


def tanh(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out_data = np.tanh(a.data)

    def bw(out: Tensor):
        a._accumulate(out.grad * (1.0 - out.data ** 2))

    return from_op(out_data, (a,), bw)


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    # stable piecewise form
    x = a.data
    e = np.exp(-np.abs(x))
    out_data = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def bw(out: Tensor):
        a._accumulate(out.grad * out.data * (1.0 - out.data))

    return from_op(out_data, (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.reshape(shape)

    def bw(out: Tensor):
        a._accumulate(out.grad.reshape(a.data.shape))

    return from_op(out_data, (a,), bw)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(out: Tensor):
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.data.shape).copy())

    return from_op(out_data, (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def rows(a: Tensor, indices) -> Tensor:
    """Gather rows along axis 0; backward scatter-adds."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    out_data = a.data[idx]

    def bw(out: Tensor):
        g = np.zeros_like(a.data)
        np.add.at(g, idx, out.grad)
        a._accumulate(g)

    return from_op(out_data, (a,), bw)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis."""
    a = as_tensor(a)
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out_data = a.data[sl]

    def bw(out: Tensor):
        g = np.zeros_like(a.data)
        g[sl] = out.grad
        a._accumulate(g)

    return from_op(out_data, (a,), bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.stack([t.data for t in tensors], axis=axis)

    def bw(out: Tensor):
        pieces = np.split(out.grad, len(tensors), axis=axis)
        for t, g in zip(tensors, pieces):
            if t.requires_grad:
                t._accumulate(np.squeeze(g, axis=axis))

    return from_op(out_data, tuple(tensors), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]

    def bw(out: Tensor):
        for t, g in zip(tensors, np.split(out.grad, splits, axis=axis)):
            if t.requires_grad:
                t._accumulate(g)

    return from_op(out_data, tuple(tensors), bw)


def logsumexp_np(x: np.ndarray, axis=None, keepdims: bool = False) -> np.ndarray:
    """Max-shifted log-sum-exp on plain arrays; -inf rows stay -inf."""
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True)) + m
    if not keepdims:
        out = np.squeeze(out, axis=axis) if axis is not None else out.reshape(())
    return out


def softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    return x - logsumexp_np(x, axis=axis, keepdims=True)


def logsumexp(a: Tensor, axis=None) -> Tensor:
    """log(sum(exp(a))); scalar when axis is None.  Empty input is a usage error."""
    a = as_tensor(a)
    if a.data.size == 0:
        raise ValueError("logsumexp of empty input")
    if np.any(np.isnan(a.data)) or np.any(a.data == np.inf):
        raise ValueError("logsumexp entries must be in [-inf, finite]")
    out_data = logsumexp_np(a.data, axis=axis)

    def bw(out: Tensor):
        if axis is None:
            if np.isneginf(out.data):
                a._accumulate(np.zeros_like(a.data))
            else:
                a._accumulate(out.grad * np.exp(a.data - out.data))
        else:
            o = np.expand_dims(out.data, axis)
            g = np.expand_dims(out.grad, axis)
            w = np.where(np.isneginf(o), 0.0, np.exp(a.data - np.where(np.isneginf(o), 0.0, o)))
            a._accumulate(g * w)

    return from_op(out_data, (a,), bw)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Probability rows along ``axis``; NaN input is a usage error."""
    a = as_tensor(a)
    if np.any(np.isnan(a.data)):
        raise ValueError("softmax input contains NaN")
    out_data = softmax_np(a.data, axis=axis)

    def bw(out: Tensor):
        s = out.data
        dot = np.sum(out.grad * s, axis=axis, keepdims=True)
        a._accumulate(s * (out.grad - dot))

    return from_op(out_data, (a,), bw)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if np.any(np.isnan(a.data)):
        raise ValueError("log_softmax input contains NaN")
    out_data = log_softmax_np(a.data, axis=axis)

    def bw(out: Tensor):
        s = np.exp(out.data)
        a._accumulate(out.grad - s * np.sum(out.grad, axis=axis, keepdims=True))

    return from_op(out_data, (a,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    n = x.data.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out_data = xhat * gain.data + bias.data

    def bw(out: Tensor):
        g = out.grad
        if gain.requires_grad:
            gain._accumulate((g * xhat).reshape(-1, n).sum(axis=0))
        if bias.requires_grad:
            bias._accumulate(g.reshape(-1, n).sum(axis=0))
        if x.requires_grad:
            gh = g * gain.data
            dx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
            x._accumulate(dx)

    return from_op(out_data, (x, gain, bias), bw)


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar root; fills ``.grad`` on ancestors."""
    if loss.data.size != 1:
        raise ValueError("backward root must be scalar")
    if not loss.requires_grad and loss._backward is None:
        # constant graph: nothing to fill
        loss._accumulate(np.ones_like(loss.data))
        return

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack_.append((p, False))

    loss._accumulate(np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward()
