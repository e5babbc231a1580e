"""Minimal reverse-mode automatic differentiation over numpy arrays.

Graphs are built dynamically: every operation on a :class:`Tensor` that
depends on a gradient-requiring input records its parents and a closure
mapping the output gradient to parent gradients. :func:`backward` walks the
graph once in reverse topological order.

Shapes are kept deliberately simple. Binary elementwise operations accept
operands of equal shape, a size-1 operand, or a ``(batch, feature)`` operand
combined with a ``(feature,)`` operand. Anything else is a
:class:`DimensionError`.
"""
from __future__ import annotations

import math
from typing import Callable, Dict, Iterable, Optional, Sequence

import numpy as np
from scipy.special import expit

EPS = 1e-7
_ONE_HOT_LIMIT = 1 << 20

ACTIVATIONS = ("identity", "relu", "sigmoid", "softplus")


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class ContractError(ValueError):
    """A documented precondition was violated."""


class Tensor:
    """A float64 array with an optional position in a compute graph."""

    __slots__ = ("value", "requires_grad", "parents", "backward_fn", "name")
    __array_ufunc__ = None

    def __init__(self, value, requires_grad: bool = False, name: Optional[str] = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.parents: tuple = ()
        self.backward_fn: Optional[Callable] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def item(self) -> float:
        if self.value.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.value.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    __hash__ = object.__hash__

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.value = value
    out.name = None
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
    else:
        out.requires_grad = False
        out.parents = ()
        out.backward_fn = None
    return out


def _check_broadcast(a: tuple, b: tuple) -> None:
    if a == b:
        return
    if math.prod(a) == 1 or math.prod(b) == 1:
        return
    if len(a) == 2 and len(b) == 1 and a[1] == b[0]:
        return
    if len(b) == 2 and len(a) == 1 and b[1] == a[0]:
        return
    raise DimensionError(f"cannot combine shapes {a} and {b}")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if math.prod(shape) == 1:
        return np.full(shape, grad.sum())
    # (batch, feature) against (feature,)
    return grad.sum(axis=0).reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _node(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _node(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    av, bv = a.value, b.value
    return _node(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    av, bv = a.value, b.value
    out = av / bv

    def back(g):
        ga = g / bv
        return _unbroadcast(ga, av.shape), _unbroadcast(-ga * out, bv.shape)

    return _node(out, (a, b), back)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul of {a.shape} and {b.shape}")
    av, bv = a.value, b.value
    return _node(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.value > 0
    return _node(x.value * mask, (x,), lambda g: (g * mask,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = expit(x.value)
    return _node(s, (x,), lambda g: (g * s * (1.0 - s),))


def softplus(x) -> Tensor:
    x = as_tensor(x)
    v = x.value
    return _node(np.logaddexp(0.0, v), (x,), lambda g: (g * expit(v),))


def log(x) -> Tensor:
    x = as_tensor(x)
    v = x.value
    return _node(np.log(v), (x,), lambda g: (g / v,))


def square(x) -> Tensor:
    x = as_tensor(x)
    v = x.value
    return _node(v * v, (x,), lambda g: (2.0 * g * v,))


def maximum(x, floor: float) -> Tensor:
    """Elementwise ``max(x, floor)``; the floored entries get zero gradient."""
    x = as_tensor(x)
    keep = x.value >= floor
    return _node(np.where(keep, x.value, floor), (x,), lambda g: (g * keep,))


def clamp(x, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    v = x.value
    inside = (v >= lo) & (v <= hi)
    return _node(np.clip(v, lo, hi), (x,), lambda g: (g * inside,))


def total(x) -> Tensor:
    """Sum of all entries, as a shape ``(1,)`` tensor."""
    x = as_tensor(x)
    shape = x.shape
    return _node(np.array([x.value.sum()]), (x,), lambda g: (np.full(shape, g[0]),))


def mean(x) -> Tensor:
    x = as_tensor(x)
    shape, n = x.shape, x.size
    if n == 0:
        raise ContractError("mean of an empty tensor")
    return _node(np.array([x.value.sum() / n]), (x,), lambda g: (np.full(shape, g[0] / n),))


def reshape(x, shape: tuple) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _node(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))


def stop_gradient(x) -> Tensor:
    """Identity in the forward pass; a graph leaf for the backward pass."""
    x = as_tensor(x)
    return Tensor(x.value)


def binary_cross_entropy(label, pred) -> Tensor:
    """Elementwise ``-y log p - (1 - y) log(1 - p)`` with ``p`` clamped to ``[EPS, 1 - EPS]``.

    ``label`` may itself be a tensor (soft or differentiable targets).
    """
    y, p = as_tensor(label), as_tensor(pred)
    _check_broadcast(y.shape, p.shape)
    yv = y.value
    pv = np.clip(p.value, EPS, 1.0 - EPS)
    inside = (p.value >= EPS) & (p.value <= 1.0 - EPS)
    lp, l1p = np.log(pv), np.log1p(-pv)
    out = -(yv * lp + (1.0 - yv) * l1p)

    def back(g):
        gp = g * inside * ((1.0 - yv) / (1.0 - pv) - yv / pv)
        gy = g * (l1p - lp)
        return _unbroadcast(gy, yv.shape), _unbroadcast(gp, p.shape)

    return _node(out, (y, p), back)


def embedding_mean(table, ids: np.ndarray) -> Tensor:
    """Mean of looked-up embedding rows: ``ids`` is ``(batch, k)`` -> ``(batch, dim)``."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if ids.ndim != 2:
        raise DimensionError(f"ids must be 2-d (batch, k), got shape {ids.shape}")
    if ids.shape[1] == 0:
        raise ContractError("empty feature list")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(
            f"feature id out of range [0, {table.shape[0]}): "
            f"min={ids.min()}, max={ids.max()}"
        )
    batch, k = ids.shape
    tv = table.value
    n_rows, dim = tv.shape

    if batch * n_rows <= _ONE_HOT_LIMIT:
        # small vocabulary: pool through a dense (batch, vocab) count matrix
        counts = np.zeros((batch, n_rows))
        counts[np.arange(batch)[:, None], ids] = 1.0
        if counts.sum() != ids.size:  # repeated id within a row
            counts = np.bincount((np.arange(batch)[:, None] * n_rows + ids).reshape(-1),
                                 minlength=batch * n_rows).reshape(batch, n_rows).astype(np.float64)
        counts /= k
        out = counts @ tv

        def back(g):
            return (counts.T @ g,)
    else:
        cols = np.ascontiguousarray(ids.T)
        out = np.take(tv, cols[0], axis=0)
        for c in cols[1:]:
            out += np.take(tv, c, axis=0)
        out /= k

        def back(g):
            gk = g / k
            flat = cols.reshape(-1)
            grad = np.empty_like(tv)
            for d in range(dim):
                grad[:, d] = np.bincount(flat, weights=np.tile(gk[:, d], k), minlength=n_rows)
            return (grad,)

    return _node(out, (table,), back)


def dense(x, weights, bias, activation: str = "identity") -> Tensor:
    """Affine map ``x @ weights + bias`` followed by ``activation``.

    Recorded as a single graph node.
    """
    x, w, b = as_tensor(x), as_tensor(weights), as_tensor(bias)
    if x.value.ndim != 2 or w.value.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"dense input {x.shape} does not conform to weights {w.shape}")
    if b.shape != (w.shape[1],):
        raise DimensionError(f"bias shape {b.shape} != ({w.shape[1]},)")
    xv, wv = x.value, w.value
    z = xv @ wv + b.value
    if activation == "identity":
        out = z
        dz = None
    elif activation == "relu":
        out = np.maximum(z, 0.0)
        dz = z > 0
    elif activation == "sigmoid":
        out = expit(z)
        dz = out * (1.0 - out)
    elif activation == "softplus":
        out = np.logaddexp(0.0, z)
        dz = expit(z)
    else:
        raise ValueError(f"unknown activation {activation!r}; expected one of {ACTIVATIONS}")

    def back(g):
        gz = g if dz is None else g * dz
        return gz @ wv.T, xv.T @ gz, gz.sum(axis=0)

    return _node(out, (x, w, b), back)


def backward(output: Tensor, wrt: Optional[Iterable[Tensor]] = None) -> Dict[Tensor, np.ndarray]:
    """Gradients of a scalar ``output`` with respect to graph leaves.

    Returns a map from every gradient-requiring leaf reachable from
    ``output`` to its gradient. When ``wrt`` is given, exactly those tensors
    are returned, with zeros for any that the output does not depend on.
    """
    if output.size != 1:
        raise ContractError(f"backward needs a scalar output, got shape {output.shape}")

    order = []
    seen = set()
    if output.requires_grad:
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

    grads: Dict[int, np.ndarray] = {id(output): np.ones_like(output.value)}
    leaves: Dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            leaves[node] = g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg

    if wrt is None:
        return leaves
    return {t: leaves.get(t, np.zeros_like(t.value)) for t in wrt}
