"""Reverse-mode automatic differentiation over numpy arrays.

A small tensor engine: forward passes build a graph of numpy-backed nodes,
``backward()`` runs one reverse sweep and accumulates gradients into every
node created with ``requires_grad=True``. Everything is float64. Analytic
gradients are validated against central finite differences in the test
suite, so keep backward rules exact (no approximations, no detached terms
unless they cancel analytically).
"""
from __future__ import annotations

import contextlib

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference fast path)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _as_array(x):
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A numpy array plus the bookkeeping needed for reverse-mode autodiff."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    # make `ndarray <op> Tensor` defer to the reflected Tensor methods
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._vjp = None

    # -- construction of op nodes ------------------------------------------

    @staticmethod
    def _make(data, parents, vjp):
        """Create a node. `vjp(g)` returns one gradient per parent (or None)."""
        out = Tensor(data)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._vjp = vjp
        return out

    # -- basics --------------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    def detach(self):
        return Tensor(self.data)

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        topo = []
        state = {}
        stack = [self]
        while stack:
            node = stack[-1]
            st = state.get(id(node), 0)
            if st == 0:
                state[id(node)] = 1
                for p in node._parents:
                    if state.get(id(p), 0) == 0 and (p.requires_grad or p._parents):
                        stack.append(p)
            else:
                stack.pop()
                if st == 1:
                    state[id(node)] = 2
                    topo.append(node)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is None:
                # leaf parameter: accumulate into .grad
                if node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = node._vjp(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not (p.requires_grad or p._parents):
                    continue
                pg = _as_array(pg)
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg

    # -- arithmetic ------------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        data = self.data + other.data
        return Tensor._make(
            data,
            (self, other),
            lambda g: (_unbroadcast(g, self.shape), _unbroadcast(g, other.shape)),
        )

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other)
        data = self.data - other.data
        return Tensor._make(
            data,
            (self, other),
            lambda g: (_unbroadcast(g, self.shape), _unbroadcast(-g, other.shape)),
        )

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        other = as_tensor(other)
        data = self.data * other.data
        return Tensor._make(
            data,
            (self, other),
            lambda g: (
                _unbroadcast(g * other.data, self.shape),
                _unbroadcast(g * self.data, other.shape),
            ),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        data = self.data / other.data
        return Tensor._make(
            data,
            (self, other),
            lambda g: (
                _unbroadcast(g / other.data, self.shape),
                _unbroadcast(-g * self.data / (other.data**2), other.shape),
            ),
        )

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, exponent):
        if not np.isscalar(exponent):
            raise TypeError("only scalar exponents are supported")
        data = self.data**exponent
        return Tensor._make(
            data,
            (self,),
            lambda g: (g * exponent * self.data ** (exponent - 1),),
        )

    def __matmul__(self, other):
        other = as_tensor(other)
        if self.ndim < 2 or other.ndim < 2:
            raise ValueError("matmul expects >=2-D operands")
        data = self.data @ other.data
        a_needs = self.requires_grad or bool(self._parents)
        b_needs = other.requires_grad or bool(other._parents)

        def vjp(g):
            da = db = None
            if a_needs:
                da = _unbroadcast(g @ other.data.swapaxes(-1, -2), self.shape)
            if b_needs:
                if other.ndim == 2 and self.ndim > 2:
                    # batched activations against a 2-D parameter: one GEMM
                    k = self.shape[-1]
                    db = self.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
                else:
                    db = _unbroadcast(self.data.swapaxes(-1, -2) @ g, other.shape)
            return da, db

        return Tensor._make(data, (self, other), vjp)

    # -- shape ops ---------------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor._make(
            self.data.reshape(shape), (self,), lambda g: (g.reshape(old),)
        )

    def swapaxes(self, a, b):
        return Tensor._make(
            self.data.swapaxes(a, b), (self,), lambda g: (g.swapaxes(a, b),)
        )

    def sum(self, axis=None, keepdims=False):
        data = self.data.sum(axis=axis, keepdims=keepdims)

        def vjp(g):
            if axis is None:
                return (np.broadcast_to(g, self.shape).copy(),)
            if not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, self.shape).copy(),)

        return Tensor._make(data, (self,), vjp)

    def mean(self, axis=None, keepdims=False):
        n = self.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def max(self, axis=-1, keepdims=False):
        """Maximum with subgradient routed to the first argmax."""
        data = self.data.max(axis=axis, keepdims=keepdims)
        idx = np.expand_dims(np.argmax(self.data, axis=axis), axis)

        def vjp(g):
            if not keepdims:
                g = np.expand_dims(g, axis)
            out = np.zeros_like(self.data)
            np.put_along_axis(out, idx, g, axis=axis)
            return (out,)

        return Tensor._make(data, (self,), vjp)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


# -- elementwise functions ----------------------------------------------------


def exp(x):
    x = as_tensor(x)
    data = np.exp(x.data)
    return Tensor._make(data, (x,), lambda g: (g * data,))


def log(x):
    x = as_tensor(x)
    return Tensor._make(np.log(x.data), (x,), lambda g: (g / x.data,))


def relu(x):
    x = as_tensor(x)
    keep = x.data > 0
    return Tensor._make(np.where(keep, x.data, 0.0), (x,), lambda g: (g * keep,))


def sigmoid(x):
    x = as_tensor(x)
    data = stable_sigmoid(x.data)
    return Tensor._make(data, (x,), lambda g: (g * data * (1.0 - data),))


def softplus(x):
    x = as_tensor(x)
    data = np.logaddexp(0.0, x.data)
    return Tensor._make(data, (x,), lambda g: (g * stable_sigmoid(x.data),))


def clip(x, lo, hi):
    x = as_tensor(x)
    keep = (x.data >= lo) & (x.data <= hi)
    return Tensor._make(np.clip(x.data, lo, hi), (x,), lambda g: (g * keep,))


def softmax(x, axis=-1):
    x = as_tensor(x)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * p).sum(axis=axis, keepdims=True)
        return (p * (g - inner),)

    return Tensor._make(p, (x,), vjp)


def where_mask(mask, x, fill):
    """Select `x` where boolean `mask` holds, a constant `fill` elsewhere."""
    x = as_tensor(x)
    mask = np.asarray(mask, dtype=bool)
    data = np.where(mask, x.data, fill)
    return Tensor._make(data, (x,), lambda g: (g * mask,))


# -- structural ops -------------------------------------------------------------


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._make(data, tuple(tensors), vjp)


def broadcast_to(x, shape):
    x = as_tensor(x)
    data = np.broadcast_to(x.data, shape).copy()
    return Tensor._make(data, (x,), lambda g: (_unbroadcast(g, x.shape),))


def rows(table, index):
    """Gather rows of a 2-D tensor; backward is scatter-add (embedding lookup)."""
    table = as_tensor(table)
    index = np.asarray(index)
    data = table.data[index]

    def vjp(g):
        out = np.zeros_like(table.data)
        np.add.at(out, index.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (out,)

    return Tensor._make(data, (table,), vjp)


def segment_sum(x, segment_ids, num_segments):
    """Sum rows of `x` grouped by `segment_ids` -> (num_segments, ...)."""
    x = as_tensor(x)
    segment_ids = np.asarray(segment_ids)
    data = np.zeros((num_segments,) + x.shape[1:])
    np.add.at(data, segment_ids, x.data)
    return Tensor._make(data, (x,), lambda g: (g[segment_ids],))


def scatter_edges(values, src, dst, n):
    """Place per-edge values (..., E) into dense (..., n, n) adjacency slots."""
    values = as_tensor(values)
    src = np.asarray(src)
    dst = np.asarray(dst)
    data = np.zeros(values.shape[:-1] + (n, n))
    data[..., src, dst] = values.data
    return Tensor._make(data, (values,), lambda g: (g[..., src, dst],))


def stable_sigmoid(x):
    """Numerically stable logistic function on a plain ndarray."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out
