"""Dense float64 tensors with reverse-mode differentiation.

Everything runs on numpy arrays in double precision; each op returns a new
Tensor holding a backward closure, and ``backward()`` walks the tape once in
topological order. Values are checked for NaN/Inf at every op boundary.

Multiply-add accounting: matmul and linear report madds to any active
FlopCounter; softmax, layernorm and batchnorm report 5 flops per input
element (see NORM_FLOPS_PER_ELEMENT). Elementwise ops, reductions, gathers
and reshapes are free. This convention is mirrored by the analytic counter
in ``complexity``.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import NonFiniteError, ShapeError

NORM_FLOPS_PER_ELEMENT = 5


class FlopCounter:
    """Context manager accumulating multiply-adds executed by kernel ops."""

    def __init__(self):
        self.madds = 0
        self.norm_flops = 0

    def __enter__(self):
        _ACTIVE_COUNTERS.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_COUNTERS.remove(self)
        return False


_ACTIVE_COUNTERS: list[FlopCounter] = []


def _count_madds(n: int) -> None:
    for c in _ACTIVE_COUNTERS:
        c.madds += int(n)


def _count_norm(n_elements: int) -> None:
    for c in _ACTIVE_COUNTERS:
        c.norm_flops += NORM_FLOPS_PER_ELEMENT * int(n_elements)


def _check_finite(arr: np.ndarray, where: str) -> None:
    # One summation pass; any NaN/Inf in the array makes the sum non-finite.
    if arr.size and not math.isfinite(float(np.sum(arr))):
        bad = int(np.count_nonzero(~np.isfinite(arr)))
        if bad == 0:
            return  # benign overflow of the probe sum itself
        raise NonFiniteError(f"{where}: {bad} non-finite value(s) in shape {arr.shape}")


class Tensor:
    """A node on the tape: float64 value, lazily allocated grad, parents."""

    __slots__ = ("data", "grad", "name", "_parents", "_backward")

    def __init__(self, data, parents=(), backward=None, name=None):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, name or "tensor")
        self.data = arr
        self.grad = None
        self.name = name
        self._parents = tuple(parents)
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"<Tensor{tag} shape={self.data.shape}>"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def backward(root: Tensor) -> None:
    """Reverse-mode sweep from a scalar root; visits each node exactly once."""
    if root.data.ndim != 0:
        raise ShapeError(f"backward needs a scalar root, got shape {root.data.shape}")
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
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    root._accumulate(np.ones_like(root.data))
    for node in reversed(order):
        if node._backward is not None:
            g = node.grad
            _check_finite(g, "gradient")
            node._backward(g)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting expanded."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    squeeze = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if squeeze:
        g = g.sum(axis=squeeze, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out_data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from None

    def back(g):
        a._accumulate(_unbroadcast(g, a.data.shape))
        b._accumulate(_unbroadcast(g, b.data.shape))

    return Tensor(out_data, (a, b), back)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out_data = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: cannot broadcast {a.shape} with {b.shape}") from None

    def back(g):
        a._accumulate(_unbroadcast(g, a.data.shape))
        b._accumulate(-_unbroadcast(g, b.data.shape))

    return Tensor(out_data, (a, b), back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out_data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from None

    def back(g):
        a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return Tensor(out_data, (a, b), back)


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)

    def back(g):
        x._accumulate(g * s)

    return Tensor(x.data * s, (x,), back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batch broadcasting over leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner-dimension mismatch: {a.shape} @ {b.shape}")
    try:
        out_data = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul batch-dimension mismatch: {a.shape} @ {b.shape}") from None
    m, n = out_data.shape[-2], out_data.shape[-1]
    k = a.data.shape[-1]
    _count_madds(int(np.prod(out_data.shape[:-2], dtype=np.int64)) * m * k * n)

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        a._accumulate(_unbroadcast(ga, a.data.shape))
        b._accumulate(_unbroadcast(gb, b.data.shape))

    return Tensor(out_data, (a, b), back)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map over the trailing dimension: y = x @ w + b."""
    x, w = as_tensor(x), as_tensor(w)
    if w.data.ndim != 2:
        raise ShapeError(f"linear weight must be 2-d, got {w.shape}")
    d_in, d_out = w.data.shape
    if x.data.shape[-1] != d_in:
        raise ShapeError(f"linear: input {x.shape} does not end in {d_in} (weight {w.shape})")
    flat = x.data.reshape(-1, d_in)
    out = flat @ w.data
    _count_madds(flat.shape[0] * d_in * d_out)
    if b is not None:
        b = as_tensor(b)
        if b.data.shape != (d_out,):
            raise ShapeError(f"linear bias shape {b.shape} != ({d_out},)")
        out = out + b.data
    out = out.reshape(x.data.shape[:-1] + (d_out,))
    parents = (x, w) if b is None else (x, w, b)

    def back(g):
        g2 = g.reshape(-1, d_out)
        x._accumulate((g2 @ w.data.T).reshape(x.data.shape))
        w._accumulate(flat.T @ g2)
        if b is not None:
            b._accumulate(g2.sum(axis=0))

    return Tensor(out, parents, back)


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0

    def back(g):
        x._accumulate(g * mask)

    return Tensor(np.where(mask, x.data, 0.0), (x,), back)


def tsum(x: Tensor, axis=None) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis)

    def back(g):
        if axis is None:
            x._accumulate(np.broadcast_to(g, x.data.shape).copy())
        else:
            x._accumulate(np.broadcast_to(np.expand_dims(g, axis), x.data.shape).copy())

    return Tensor(out, (x,), back)


def tmean(x: Tensor, axis=None) -> Tensor:
    x = as_tensor(x)
    if x.data.size == 0:
        raise ShapeError("mean of a zero-length tensor")
    n = x.data.size if axis is None else x.data.shape[axis]
    out = x.data.mean(axis=axis)

    def back(g):
        if axis is None:
            x._accumulate(np.broadcast_to(g / n, x.data.shape).copy())
        else:
            x._accumulate(np.broadcast_to(np.expand_dims(g, axis) / n, x.data.shape).copy())

    return Tensor(out, (x,), back)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(shape)

    def back(g):
        x._accumulate(g.reshape(x.data.shape))

    return Tensor(out, (x,), back)


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    x = as_tensor(x)

    def back(g):
        x._accumulate(np.swapaxes(g, a, b))

    return Tensor(np.swapaxes(x.data, a, b), (x,), back)


def moveaxis(x: Tensor, src: int, dst: int) -> Tensor:
    x = as_tensor(x)

    def back(g):
        x._accumulate(np.moveaxis(g, dst, src))

    return Tensor(np.moveaxis(x.data, src, dst), (x,), back)


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather slices along an axis; repeated indices accumulate gradient."""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp)
    ax = axis % x.data.ndim
    if idx.size and (idx.min() < 0 or idx.max() >= x.data.shape[ax]):
        raise ShapeError(f"take: index out of range for axis {ax} of shape {x.shape}")
    out = np.take(x.data, idx, axis=ax)

    def back(g):
        gx = np.zeros_like(x.data)
        np.add.at(np.moveaxis(gx, ax, 0), idx, np.moveaxis(g, ax, 0))
        x._accumulate(gx)

    return Tensor(out, (x,), back)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].data.ndim
    out = np.concatenate([t.data for t in tensors], axis=ax)
    sizes = [t.data.shape[ax] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        gm = np.moveaxis(g, ax, 0)
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            t._accumulate(np.moveaxis(gm[lo:hi], 0, ax))

    return Tensor(out, tuple(tensors), back)


# ---------------------------------------------------------------------------
# normalization and loss


def softmax_lastdim(x: Tensor) -> Tensor:
    """Stable softmax over the trailing dimension; rows sum to one."""
    x = as_tensor(x)
    if x.data.shape[-1] < 1:
        raise ShapeError("softmax over an empty last dimension")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    _count_norm(x.data.size)

    def back(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        x._accumulate(y * (g - dot))

    return Tensor(y, (x,), back)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the trailing dimension, then apply the affine (gamma, beta)."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.data.shape[-1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(f"layernorm affine shapes {gamma.shape}/{beta.shape} != ({c},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    _count_norm(x.data.size)

    def back(g):
        gamma._accumulate((g * xhat).reshape(-1, c).sum(axis=0))
        beta._accumulate(g.reshape(-1, c).sum(axis=0))
        gx = g * gamma.data
        term = gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
        x._accumulate(term * inv)

    return Tensor(gamma.data * xhat + beta.data, (x, gamma, beta), back)


class BatchNormState:
    """Running statistics buffer; updated in train mode, read in eval mode."""

    def __init__(self, channels: int):
        self.running_mean = np.zeros(channels, dtype=np.float64)
        self.running_var = np.ones(channels, dtype=np.float64)

    def copy(self):
        other = BatchNormState(self.running_mean.shape[0])
        other.running_mean = self.running_mean.copy()
        other.running_var = self.running_var.copy()
        return other


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization of a (rows, channels) tensor over rows.

    Biased variance is used both for normalization and for the running-stat
    update. Eval mode normalizes with the stored running statistics.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.data.ndim != 2:
        raise ShapeError(f"batchnorm expects (rows, channels), got {x.shape}")
    rows, c = x.data.shape
    if rows == 0:
        raise ShapeError("batchnorm over zero rows")
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(f"batchnorm affine shapes {gamma.shape}/{beta.shape} != ({c},)")
    _count_norm(x.data.size)

    if training:
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        state.running_mean = (1.0 - momentum) * state.running_mean + momentum * mu
        state.running_var = (1.0 - momentum) * state.running_var + momentum * var
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu) * inv

        def back(g):
            gamma._accumulate((g * xhat).sum(axis=0))
            beta._accumulate(g.sum(axis=0))
            gx = g * gamma.data
            term = gx - gx.mean(axis=0) - xhat * (gx * xhat).mean(axis=0)
            x._accumulate(term * inv)

    else:
        inv = 1.0 / np.sqrt(state.running_var + eps)
        xhat = (x.data - state.running_mean) * inv

        def back(g):
            gamma._accumulate((g * xhat).sum(axis=0))
            beta._accumulate(g.sum(axis=0))
            x._accumulate(g * gamma.data * inv)

    return Tensor(gamma.data * xhat + beta.data, (x, gamma, beta), back)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    logits = as_tensor(logits)
    data = logits.data
    if data.ndim == 1:
        data = data[None, :]
    if data.ndim != 2:
        raise ShapeError(f"cross_entropy logits must be 1-d or 2-d, got {logits.shape}")
    n, k = data.shape
    y = np.atleast_1d(np.asarray(labels, dtype=np.intp))
    if y.shape != (n,):
        raise ShapeError(f"cross_entropy labels shape {y.shape} != ({n},)")
    if y.size and (y.min() < 0 or y.max() >= k):
        raise ValueError(f"cross_entropy: label out of range [0, {k})")
    shifted = data - data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1)) + data.max(axis=1)
    losses = lse - data[np.arange(n), y]

    def back(g):
        p = np.exp(shifted)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(n), y] -= 1.0
        glog = (float(g) / n) * p
        logits._accumulate(glog.reshape(logits.data.shape))

    return Tensor(losses.mean(), (logits,), back)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity at rate 0."""
    if rate <= 0.0:
        return x
    if rate >= 1.0:
        raise ValueError(f"dropout rate {rate} must be < 1")
    x = as_tensor(x)
    mask = (rng.random(x.data.shape) >= rate) / (1.0 - rate)

    def back(g):
        x._accumulate(g * mask)

    return Tensor(x.data * mask, (x,), back)
