"""Reverse-mode autodiff over dense numpy arrays.

The graph is recorded implicitly through parent links while `grad_enabled`
is on; `backward` runs the closures in reverse topological order. Tapes are
meant to live for one training step and be dropped.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() needs a scalar loss")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -np.asarray(other))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"


def _wrap(value, like: Tensor) -> np.ndarray:
    return np.asarray(value, dtype=like.data.dtype)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad or p._parents for p in parents):
        out.requires_grad = any(p.requires_grad for p in parents)
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward op."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        data = a.data + _wrap(b, a)

        def back_const(g):
            a._accumulate(_unbroadcast(g, a.data.shape))

        return _node(data, (a,), back_const)
    data = a.data + b.data

    def back(g):
        a._accumulate(_unbroadcast(g, a.data.shape))
        b._accumulate(_unbroadcast(g, b.data.shape))

    return _node(data, (a, b), back)


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        const = _wrap(b, a)
        data = a.data * const

        def back_const(g):
            a._accumulate(_unbroadcast(g * const, a.data.shape))

        return _node(data, (a,), back_const)
    data = a.data * b.data

    def back(g):
        a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _node(data, (a, b), back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data @ b.data

    def back(g):
        a._accumulate(g @ b.data.T)
        b._accumulate(a.data.T @ g)

    return _node(data, (a, b), back)


def sigmoid(a: Tensor) -> Tensor:
    data = 1.0 / (1.0 + np.exp(-a.data))

    def back(g):
        a._accumulate(g * data * (1.0 - data))

    return _node(data, (a,), back)


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def back(g):
        a._accumulate(g * (1.0 - data * data))

    return _node(data, (a,), back)


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0)

    def back(g):
        a._accumulate(g * (a.data > 0))

    return _node(data, (a,), back)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        for p, piece in zip(parts, np.split(g, splits, axis=axis)):
            p._accumulate(piece)

    return _node(data, tuple(parts), back)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    data = a.data[..., start:stop]

    def back(g):
        full = np.zeros_like(a.data)
        full[..., start:stop] = g
        a._accumulate(full)

    return _node(data, (a,), back)


def embedding(table: Tensor, indices) -> Tensor:
    # copy: the backward closure must see the indices as they are now, not
    # as the caller may later mutate them
    idx = np.array(indices, dtype=np.int64, copy=True)
    data = table.data[idx]

    def back(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        table._accumulate(full)

    return _node(data, (table,), back)


def rows(a: Tensor, index) -> Tensor:
    """Select rows by integer index (gather along axis 0)."""
    idx = np.array(index, dtype=np.int64, copy=True)
    data = a.data[idx]

    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        a._accumulate(full)

    return _node(data, (a,), back)


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)

    def back(g):
        a._accumulate(g.reshape(a.data.shape))

    return _node(data, (a,), back)


def total(a: Tensor) -> Tensor:
    data = np.asarray(a.data.sum(dtype=np.float64), dtype=a.data.dtype)

    def back(g):
        a._accumulate(np.broadcast_to(g, a.data.shape))

    return _node(data, (a,), back)


def mean(a: Tensor) -> Tensor:
    return mul(total(a), 1.0 / a.data.size)


def weighted_sum(a: Tensor, weights) -> Tensor:
    """Scalar sum(a * weights) with constant weights, accumulated in 64-bit."""
    w = np.array(weights, dtype=np.float64, copy=True)
    data = np.asarray((a.data.astype(np.float64) * w).sum(), dtype=a.data.dtype)

    def back(g):
        a._accumulate((g * w).astype(a.data.dtype))

    return _node(data, (a,), back)


# -- fused categorical loss ---------------------------------------------------

def masked_log_softmax_kernel(logits: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    """Row-wise log softmax restricted to allowed categories (mask True)."""
    x = logits.astype(np.float64, copy=True)
    if mask is not None:
        if not mask.any(axis=-1).all():
            raise ValueError("a row has every category masked")
        x[~mask] = -np.inf
    x -= x.max(axis=-1, keepdims=True)
    with np.errstate(divide="ignore"):
        logp = x - np.log(np.exp(x).sum(axis=-1, keepdims=True))
    return logp


def softmax_xent(logits: np.ndarray, target: int, mask: np.ndarray | None = None):
    """Single-row contract: loss and gradient w.r.t. the logits.

    Masked categories take no probability mass; the target must be allowed.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask[target]:
            raise ValueError("target category is masked")
    logp = masked_log_softmax_kernel(logits[None, :], None if mask is None else mask[None, :])[0]
    loss = -logp[target]
    grad = np.exp(logp)
    grad[np.isneginf(logp)] = 0.0
    grad[target] -= 1.0
    return loss, grad


def xent_rows(logits: Tensor, targets, mask: np.ndarray | None = None) -> Tensor:
    """Per-row cross entropy -log p[target] over unmasked categories.

    logits: (B, K) Tensor; targets: (B,) ints; mask: optional (B, K) bool of
    allowed categories. Returns a (B,) Tensor.
    """
    idx = np.asarray(targets, dtype=np.int64)
    logp = masked_log_softmax_kernel(logits.data, mask)
    picked = logp[np.arange(len(idx)), idx]
    if np.isneginf(picked).any():
        raise ValueError("target category is masked")
    # losses stay 64-bit so long-sequence likelihood bookkeeping is exact
    data = np.asarray(-picked, dtype=np.float64)

    probs = np.exp(logp)
    probs[np.isneginf(logp)] = 0.0

    def back(g):
        grad = probs.copy()
        grad[np.arange(len(idx)), idx] -= 1.0
        logits._accumulate((grad * g[:, None]).astype(logits.data.dtype))

    return _node(data, (logits,), back)


def log_probs(logits: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Pure inference helper: per-row log probabilities (64-bit)."""
    return masked_log_softmax_kernel(np.asarray(logits), mask)


def entropy_rows(logits: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Per-row Shannon entropy of the (masked) softmax distribution."""
    logp = masked_log_softmax_kernel(logits.data, mask)
    probs = np.exp(logp)
    probs[np.isneginf(logp)] = 0.0
    plogp = np.where(probs > 0, probs * logp, 0.0)
    data = np.asarray(-plogp.sum(axis=-1), dtype=np.float64)

    def back(g):
        # dH/dx_k = -p_k * (log p_k + H)
        grad = -probs * (logp + (-plogp.sum(axis=-1, keepdims=True)))
        grad = np.where(np.isfinite(grad), grad, 0.0)
        logits._accumulate((grad * g[:, None]).astype(logits.data.dtype))

    return _node(data, (logits,), back)


def parameter(data, dtype=np.float32) -> Tensor:
    t = Tensor(np.asarray(data, dtype=dtype))
    t.requires_grad = True
    return t
