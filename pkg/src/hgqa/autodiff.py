"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation eagerly computes its value and records its parents plus a
closure mapping the output gradient to parent gradients. ``backward`` first
linearizes the graph into a topologically ordered record and then replays
that record once in reverse, accumulating gradients into the ``grad``
buffers of parameter leaves.

All data is float64: this library trades speed for gradients that can be
verified against central finite differences to ~1e-9.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np
from scipy.special import erf

from .errors import NumericalError, ShapeError

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

# When enabled, every op output is scanned for NaN/Inf and an error is
# raised naming the producing op. Off by default (it costs a pass per op).
_FINITE_CHECKS = [False]


@contextmanager
def finite_checks(enabled: bool = True):
    """Enable NaN/Inf detection on every op output inside the block."""
    prev = _FINITE_CHECKS[0]
    _FINITE_CHECKS[0] = enabled
    try:
        yield
    finally:
        _FINITE_CHECKS[0] = prev


class Tensor:
    """A float64 array plus the bookkeeping needed for backpropagation.

    Leaves are created directly (``Tensor(data)`` or ``parameter(data)``);
    everything else comes out of the ops below. ``data`` is immutable by
    convention once the tensor participates in a graph; only ``grad``
    buffers of parameter leaves are written during backward.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward")

    def __init__(self, data, requires_grad=False, op="leaf", parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.op = op
        self.parents = parents
        self._backward = backward
        # Only parameter leaves carry a persistent grad buffer; intermediate
        # gradients live in a scratch map inside backward().
        if self.requires_grad and op == "leaf":
            self.grad = np.zeros_like(self.data)
        else:
            self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def zero_grad(self):
        if self.grad is not None:
            self.grad.fill(0.0)

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Small amount of operator sugar; everything routes through the module
    # functions so autodiff bookkeeping stays in one place.
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))


def parameter(data) -> Tensor:
    """A trainable leaf with a zeroed gradient buffer."""
    return Tensor(data, requires_grad=True)


def constant(data) -> Tensor:
    """A leaf that never receives gradients."""
    return Tensor(data, requires_grad=False)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def _make(data, parents, op, backward) -> Tensor:
    if _FINITE_CHECKS[0] and not np.all(np.isfinite(data)):
        raise NumericalError(f"non-finite values produced by op '{op}'")
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, op=op, parents=tuple(parents), backward=backward)
    # Constant subgraphs keep no parents, so dead branches are collected.
    return Tensor(data, requires_grad=False, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient over axes that numpy broadcasting expanded."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(data, (a, b), "add", bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _make(data, (a, b), "sub", bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def bwd(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return _make(data, (a, b), "mul", bwd)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), "neg", lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), "scale", lambda g: (g * c,))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip values to [lo, hi]; gradient passes only through unclipped entries."""
    data = np.clip(a.data, lo, hi)
    inside = (a.data >= lo) & (a.data <= hi)

    def bwd(g):
        return (g * inside,)

    return _make(data, (a,), "clamp", bwd)


def log(a: Tensor) -> Tensor:
    data = np.log(a.data)

    def bwd(g):
        return (g / a.data,)

    return _make(data, (a,), "log", bwd)


# ---------------------------------------------------------------------------
# matrix / shape ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. Supports 2D@2D, 2D@1D, and batched 3D@3D with equal
    leading dimensions."""
    ad, bd = a.data, b.data
    if ad.ndim == 2 and bd.ndim == 2:
        if ad.shape[1] != bd.shape[0]:
            raise ShapeError(f"matmul inner dimensions differ: {ad.shape} x {bd.shape}")
        data = ad @ bd

        def bwd(g):
            return g @ bd.T, ad.T @ g

    elif ad.ndim == 2 and bd.ndim == 1:
        if ad.shape[1] != bd.shape[0]:
            raise ShapeError(f"matmul inner dimensions differ: {ad.shape} x {bd.shape}")
        data = ad @ bd

        def bwd(g):
            return np.outer(g, bd), ad.T @ g

    elif ad.ndim == 3 and bd.ndim == 3:
        if ad.shape[0] != bd.shape[0] or ad.shape[2] != bd.shape[1]:
            raise ShapeError(f"matmul batch shapes incompatible: {ad.shape} x {bd.shape}")
        data = ad @ bd

        def bwd(g):
            return g @ bd.swapaxes(-1, -2), ad.swapaxes(-1, -2) @ g

    else:
        raise ShapeError(f"matmul unsupported ndims: {ad.shape} x {bd.shape}")
    return _make(data, (a, b), "matmul", bwd)


def transpose(a: Tensor, axes: tuple) -> Tensor:
    inverse = tuple(np.argsort(axes))

    def bwd(g):
        return (g.transpose(inverse),)

    return _make(a.data.transpose(axes), (a,), "transpose", bwd)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    orig = a.data.shape

    def bwd(g):
        return (g.reshape(orig),)

    return _make(a.data.reshape(shape), (a,), "reshape", bwd)


def gather_rows(a: Tensor, indices) -> Tensor:
    """Select entries along axis 0 (rows of a matrix, elements of a vector)."""
    idx = np.asarray(indices, dtype=np.int64)
    data = a.data[idx]

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _make(data, (a,), "gather_rows", bwd)


def take_pairs(a: Tensor, cols) -> Tensor:
    """Pick a[i, cols[i]] for each row i of a 2D tensor."""
    cols = np.asarray(cols, dtype=np.int64)
    rows = np.arange(a.data.shape[0])
    data = a.data[rows, cols]

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (rows, cols), g)
        return (ga,)

    return _make(data, (a,), "take_pairs", bwd)


def sum_(a: Tensor, axis=None) -> Tensor:
    data = a.data.sum(axis=axis)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _make(data, (a,), "sum", bwd)


def mean(a: Tensor, axis=None) -> Tensor:
    count = a.data.size if axis is None else a.data.shape[axis]
    data = a.data.mean(axis=axis)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.data.shape).copy(),)
        g = np.expand_dims(g, axis) / count
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _make(data, (a,), "mean", bwd)


# ---------------------------------------------------------------------------
# nonlinearities


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    data = np.empty_like(x)
    pos = x >= 0
    data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    data[~pos] = ex / (1.0 + ex)

    def bwd(g):
        return (g * data * (1.0 - data),)

    return _make(data, (a,), "sigmoid", bwd)


def gelu(a: Tensor) -> Tensor:
    """x * Phi(x) with the exact normal CDF (erf form)."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    data = x * cdf

    def bwd(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * (cdf + x * pdf),)

    return _make(data, (a,), "gelu", bwd)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    if not (-x.ndim <= axis < x.ndim):
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.shape}")
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        return (data * (g - dot),)

    return _make(data, (a,), "softmax", bwd)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    data = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def bwd(g):
        return (g - np.exp(data) * g.sum(axis=axis, keepdims=True),)

    return _make(data, (a,), "log_softmax", bwd)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    dim = a.data.shape[-1]
    if gain.data.shape != (dim,) or bias.data.shape != (dim,):
        raise ShapeError(
            f"layer_norm affine shapes {gain.data.shape}/{bias.data.shape} "
            f"do not match last axis {dim}"
        )
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gain.data + bias.data

    def bwd(g):
        lead = tuple(range(g.ndim - 1))
        gbias = g.sum(axis=lead)
        ggain = (g * xhat).sum(axis=lead)
        gy = g * gain.data
        gx = inv * (gy - gy.mean(axis=-1, keepdims=True)
                    - xhat * (gy * xhat).mean(axis=-1, keepdims=True))
        return gx, ggain, gbias

    return _make(data, (a, gain, bias), "layer_norm", bwd)


def dropout(a: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; the caller decides train/eval by calling or not."""
    if not 0.0 <= p < 1.0:
        raise ShapeError(f"dropout probability {p} outside [0, 1)")
    if p == 0.0:
        return a
    keep = (rng.random(a.data.shape) >= p) / (1.0 - p)

    def bwd(g):
        return (g * keep,)

    return _make(a.data * keep, (a,), "dropout", bwd)


# ---------------------------------------------------------------------------
# backward pass


def linearize(root: Tensor) -> list:
    """Topologically ordered computation record ending at ``root``.

    Every tensor appears after all of its parents, so replaying the list in
    reverse applies the chain rule exactly once per op.
    """
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable parameter's grad.

    Repeated calls keep adding (use ``zero_grad`` between steps). The loss
    must be a scalar.
    """
    if loss.data.shape != ():
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return
    order = linearize(loss)
    grads = {id(loss): np.ones((), dtype=np.float64)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is not None:
                node.grad += g
            continue
        for p, pg in zip(node.parents, node._backward(g)):
            if not p.requires_grad:
                continue
            acc = grads.get(id(p))
            grads[id(p)] = pg if acc is None else acc + pg


def zero_grads(params) -> None:
    for p in params:
        p.zero_grad()


def finite_diff_check(f, params, eps: float = 1e-5) -> float:
    """Compare analytic gradients of ``f`` against central differences.

    ``f`` takes no arguments, builds a fresh graph over ``params`` (leaf
    tensors) and returns a scalar Tensor; it must be deterministic. Returns
    the maximum relative error max |a-n| / max(|a|, |n|, 1e-8) over all
    parameter entries.
    """
    if eps <= 0:
        raise ShapeError("finite_diff_check requires eps > 0")
    params = list(params)
    zero_grads(params)
    backward(f())
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        aflat = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(f().data)
            flat[i] = orig - eps
            f_minus = float(f().data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            rel = abs(aflat[i] - numeric) / max(abs(aflat[i]), abs(numeric), 1e-8)
            if rel > worst:
                worst = rel
    zero_grads(params)
    return worst
