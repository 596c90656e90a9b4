"""A small tape-based reverse-mode autodiff over numpy arrays.

Only the primitives the scorers and losses need are provided. Every op
records a closure mapping the output gradient to parent gradients; nodes
are only recorded when some parent requires a gradient, so inference runs
on the same code without building a graph.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .. import kernels


class ContractError(ValueError):
    """Raised when a differentiation request breaks the op contract."""


class Tensor:
    __slots__ = ("value", "requires_grad", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, value, requires_grad: bool = False, _parents=(), _backward=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(value, True, tuple(parents), backward)
    return Tensor(value)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    ndim_extra = g.ndim - len(shape)
    if ndim_extra > 0:
        g = g.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise and reductions
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.value - b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.value * b.value,
        (a, b),
        lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
    )


def square(a) -> Tensor:
    a = as_tensor(a)
    return _node(a.value**2, (a,), lambda g: (2.0 * a.value * g,))


def tsum(a, axis=None) -> Tensor:
    a = as_tensor(a)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _node(a.value.sum(axis=axis), (a,), back)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis), 1.0 / float(n))


def relu(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.maximum(a.value, 0.0), (a,), lambda g: (g * (a.value > 0.0),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    h = np.tanh(a.value)
    return _node(h, (a,), lambda g: (g * (1.0 - h * h),))


def activation(a, kind: str) -> Tensor:
    if kind == "relu":
        return relu(a)
    if kind == "tanh":
        return tanh(a)
    raise ValueError(f"unknown activation {kind!r}")


def bce_with_logits(logits, labels) -> Tensor:
    """Elementwise binary cross-entropy on raw logits (labels are constant)."""
    x = as_tensor(logits)
    y = np.asarray(labels, dtype=np.float64)
    val = np.maximum(x.value, 0.0) - x.value * y + np.log1p(np.exp(-np.abs(x.value)))
    sig = 0.5 * (1.0 + np.tanh(0.5 * x.value))
    return _node(val, (x,), lambda g: (g * (sig - y),))


# ---------------------------------------------------------------------------
# shape and indexing
# ---------------------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _node(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def expand_dims(a, axis) -> Tensor:
    a = as_tensor(a)
    return _node(np.expand_dims(a.value, axis), (a,), lambda g: (g.reshape(a.shape),))


def flat_slice(theta, start: int, shape) -> Tensor:
    """View of ``theta[start:start+size]`` reshaped; gradient scatters back."""
    theta = as_tensor(theta)
    size = int(np.prod(shape))
    value = theta.value[start : start + size].reshape(shape)

    def back(g):
        full = np.zeros_like(theta.value)
        full[start : start + size] = g.reshape(-1)
        return (full,)

    return _node(value, (theta,), back)


def index(a, idx) -> Tensor:
    """``a[idx]`` for basic or integer-array indices; gradient via ``np.add.at``."""
    a = as_tensor(a)

    def back(g):
        full = np.zeros_like(a.value)
        np.add.at(full, idx, g)
        return (full,)

    return _node(a.value[idx], (a,), back)


def take_rows(table, ids) -> Tensor:
    """Embedding lookup ``table[ids]`` for an integer array of any shape."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)

    def back(g):
        full = np.zeros_like(table.value)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (full,)

    return _node(table.value[ids], (table,), back)


def gather_last(a, idx) -> Tensor:
    """``take_along_axis(a, idx, axis=-1)``."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)

    def back(g):
        full = np.zeros_like(a.value)
        # put_along_axis would overwrite duplicate indices, so accumulate
        flat_a = full.reshape(-1, a.shape[-1])
        flat_i = idx.reshape(-1, idx.shape[-1])
        flat_g = g.reshape(-1, idx.shape[-1])
        rows = np.repeat(np.arange(flat_a.shape[0]), flat_i.shape[1])
        np.add.at(flat_a, (rows, flat_i.reshape(-1)), flat_g.reshape(-1))
        return (full,)

    return _node(np.take_along_axis(a.value, idx, axis=-1), (a,), back)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        av, bv = a.value, b.value
        if bv.ndim == 1:
            ga = g[..., None] * bv
            gb = np.tensordot(g, av, axes=(tuple(range(g.ndim)), tuple(range(g.ndim))))
            return _unbroadcast(ga, a.shape), gb
        if av.ndim == 1:
            ga = g @ np.swapaxes(bv, -1, -2)
            gb = av[:, None] * g[..., None, :]
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(a.value @ b.value, (a, b), back)


# ---------------------------------------------------------------------------
# softmax family
# ---------------------------------------------------------------------------


def masked_log_softmax(x, mask=None) -> Tensor:
    """Log-softmax over the last axis; entries where ``mask`` is True are excluded.

    Excluded entries get ``-inf`` and never receive gradient.
    """
    x = as_tensor(x)
    v = x.value
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        v = np.where(mask, -np.inf, v)
    m = np.max(v, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        lse = m + np.log(np.sum(np.exp(v - m), axis=-1, keepdims=True))
    out = v - lse
    p = np.exp(out)

    def back(g):
        g = np.where(np.isfinite(out), g, 0.0)
        gx = g - p * g.sum(axis=-1, keepdims=True)
        if mask is not None:
            gx = np.where(mask, 0.0, gx)
        return (gx,)

    return _node(out, (x,), back)


def logsumexp(x, axis=-1, mask=None) -> Tensor:
    x = as_tensor(x)
    v = x.value
    if mask is not None:
        v = np.where(mask, -np.inf, v)
    m = np.max(v, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        lse_k = m + np.log(np.sum(np.exp(v - m), axis=axis, keepdims=True))
    p = np.exp(v - lse_k)

    def back(g):
        return (np.expand_dims(g, axis) * p,)

    return _node(np.squeeze(lse_k, axis=axis), (x,), back)


# ---------------------------------------------------------------------------
# fused broadcast hidden layer (see kernels.fused_hidden_*)
# ---------------------------------------------------------------------------


def fused_hidden(a, b, c, v, kind: str) -> Tensor:
    """``out[u,p,n] = sum_w v[w] * act(a[u,w] + b[u,n,w] + c[u,p,w])``.

    Avoids materialising the (U, P, N, W) pre-activation in the numba path.
    """
    a, b, c, v = (as_tensor(t) for t in (a, b, c, v))
    code = kernels.ACTIVATIONS[kind]
    av, bv, cv, vv = (np.ascontiguousarray(t.value) for t in (a, b, c, v))
    out = kernels.fused_hidden_forward(av, bv, cv, vv, code)

    def back(g):
        g = np.ascontiguousarray(np.where(np.isfinite(g), g, 0.0))
        return kernels.fused_hidden_backward(av, bv, cv, vv, code, g)

    return _node(out, (a, b, c, v), back)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


def grad(loss: Tensor, wrt: Tensor) -> np.ndarray:
    """Gradient of the scalar ``loss`` with respect to the leaf ``wrt``.

    Leaves that do not participate in the graph get an all-zeros gradient.
    """
    loss = as_tensor(loss)
    if loss.value.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.value.shape}")
    if not loss.requires_grad:
        return np.zeros_like(wrt.value)

    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None or node._backward is None:
            if node is wrt and g is not None:
                grads[id(node)] = g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = np.array(pg, dtype=np.float64)
    out = grads.get(id(wrt))
    if out is None:
        return np.zeros_like(wrt.value)
    return out.reshape(wrt.shape)
