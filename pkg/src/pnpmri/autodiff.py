"""Minimal dense-tensor engine with reverse-mode differentiation.

Tensors wrap float64 numpy arrays. Each op records its parents and a
gradient closure on the output; ``backward`` walks the graph in reverse
topological order and accumulates gradients into the leaf tensors.
Gradients accumulate additively across repeated ``backward`` calls until
``zero_grad`` is invoked. Forward ops are pure; a recorded graph belongs
to a single logical thread.
"""
from __future__ import annotations

import numpy as np


class DivergenceError(RuntimeError):
    """A computation produced NaN or Inf values."""

    def __init__(self, message, last_finite=None):
        super().__init__(message)
        self.last_finite = last_finite


def assert_finite(arr, what="array"):
    """Raise DivergenceError if any entry of `arr` is NaN or Inf."""
    if not np.all(np.isfinite(arr)):
        raise DivergenceError(f"{what} contains non-finite values")


class Tensor:
    """Dense float64 array plus an optional autodiff record."""

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._grad_fn = None

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

    def zero_grad(self):
        self.grad = None

    def _record(self, parents, grad_fn):
        # grad_fn(g) returns one gradient array per parent, in order.
        self._parents = tuple(parents)
        self._grad_fn = grad_fn
        self.requires_grad = True

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; all defer to the module-level ops
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


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g, shape):
    """Sum `g` down to `shape`, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    `loss` must be a scalar produced by recorded ops (or itself a leaf
    parameter). Repeated calls without zero_grad accumulate additively.
    """
    loss = as_tensor(loss)
    if loss.size != 1:
        raise ValueError("backward requires a scalar loss")
    if loss._grad_fn is None and not loss.requires_grad:
        raise ValueError("backward through a tensor with no recorded history")

    # iterative DFS post-order: parents precede children in `topo`
    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))

    flow = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = flow.pop(id(node), None)
        if g is None:
            continue
        if node._grad_fn is not None:
            for parent, pg in zip(node._parents, node._grad_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                acc = flow.get(id(parent))
                flow[id(parent)] = pg if acc is None else acc + pg
        elif node.requires_grad:
            node.grad = g.copy() if node.grad is None else node.grad + g


# ---------------------------------------------------------------------------
# elementwise and shape ops
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)
    if a.requires_grad or b.requires_grad:
        out._record((a, b), lambda g: (_unbroadcast(g, a.shape),
                                       _unbroadcast(g, b.shape)))
    return out


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data)
    if a.requires_grad or b.requires_grad:
        out._record((a, b), lambda g: (_unbroadcast(g, a.shape),
                                       _unbroadcast(-g, b.shape)))
    return out


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)
    if a.requires_grad or b.requires_grad:
        out._record((a, b), lambda g: (_unbroadcast(g * b.data, a.shape),
                                       _unbroadcast(g * a.data, b.shape)))
    return out


def square(a):
    a = as_tensor(a)
    return mul(a, a)


def reshape(a, shape):
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape))
    if a.requires_grad:
        out._record((a,), lambda g: (g.reshape(a.shape),))
    return out


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(a.data.transpose(axes))
    if a.requires_grad:
        out._record((a,), lambda g: (g.transpose(inv),))
    return out


def swap_last(a):
    """Transpose the last two axes (matrix transpose for batched tensors)."""
    a = as_tensor(a)
    if a.ndim < 2:
        raise ValueError("swap_last needs ndim >= 2")
    axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    return transpose(a, axes)


def concat(tensors, axis):
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    if any(t.requires_grad for t in tensors):
        sizes = [t.shape[axis] for t in tensors]
        offsets = np.cumsum(sizes)[:-1]

        def grad_fn(g):
            return tuple(np.split(g, offsets, axis=axis))

        out._record(tuple(tensors), grad_fn)
    return out


def sum_all(a):
    a = as_tensor(a)
    out = Tensor(a.data.sum())
    if a.requires_grad:
        out._record((a,), lambda g: (np.full(a.shape, float(g)),))
    return out


def mean_all(a):
    a = as_tensor(a)
    out = Tensor(a.data.mean())
    if a.requires_grad:
        n = a.size
        out._record((a,), lambda g: (np.full(a.shape, float(g) / n),))
    return out


# ---------------------------------------------------------------------------
# matmul, softmax, relu
# ---------------------------------------------------------------------------

def matmul(a, b):
    """Matrix product a @ b, batched over leading axes like numpy."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must have ndim >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    out = Tensor(np.matmul(a.data, b.data))
    if a.requires_grad or b.requires_grad:
        def grad_fn(g):
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
            return ga, gb

        out._record((a, b), grad_fn)
    return out


def softmax_rows(scores):
    """Row-wise softmax (last axis), stabilized by row-max subtraction."""
    scores = as_tensor(scores)
    if scores.ndim < 2:
        raise ValueError("softmax_rows expects a matrix (ndim >= 2)")
    assert_finite(scores.data, "softmax_rows input")
    shifted = scores.data - scores.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)
    if scores.requires_grad:
        def grad_fn(g):
            dot = (g * y).sum(axis=-1, keepdims=True)
            return (y * (g - dot),)

        out._record((scores,), grad_fn)
    return out


def relu(a):
    """Elementwise max(0, x); the subgradient at exactly 0 is taken as 0."""
    a = as_tensor(a)
    out = Tensor(np.maximum(a.data, 0.0))
    if a.requires_grad:
        mask = a.data > 0
        out._record((a,), lambda g: (g * mask,))
    return out
