"""Dense tensors with tape-based reverse-mode differentiation.

Each op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to parent gradients.  ``backward`` walks
the graph in reverse topological order.  Broadcasting follows numpy; the
gradient of a broadcast operand is summed back to its shape.
"""
from __future__ import annotations

import contextlib

import numpy as np

from ..errors import ConfigError, ShapeError

_grad_enabled = True
DEFAULT_DTYPE = np.float64


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- basics
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order, seen = [], set()
        stack = [(self, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))
        self._accum(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                if node._parents:
                    # interior gradients are not needed once propagated
                    node.grad = None if node is not self else node.grad

    # -- operator sugar
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return mul(self, 1.0 / o) if np.isscalar(o) else div(self, o)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _pair(a, b):
    """Tensors for a binary op; plain scalars take the dtype of the other operand."""
    if not isinstance(a, Tensor) and isinstance(b, Tensor):
        return Tensor(a, dtype=b.dtype), b
    if not isinstance(b, Tensor) and isinstance(a, Tensor):
        return a, Tensor(b, dtype=a.dtype)
    return as_tensor(a), as_tensor(b)


def _result(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def back(g):
        if a.requires_grad:
            a._accum(unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def back(g):
        if a.requires_grad:
            a._accum(unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def back(g):
        if a.requires_grad:
            a._accum(unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), back)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)

    def back(g):
        if a.requires_grad:
            a._accum(unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accum(unbroadcast(-g * a.data / b.data**2, b.shape))

    return _result(a.data / b.data, (a, b), back)


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: x._accum(g * (1.0 - y * y)))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: x._accum(g * mask))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = _sigmoid(x.data)
    return _result(y, (x,), lambda g: x._accum(g * y * (1.0 - y)))


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return _result(y, (x,), lambda g: x._accum(g * y))


# ---------------------------------------------------------------- shape ops


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _result(x.data.reshape(shape), (x,), lambda g: x._accum(g.reshape(x.shape)))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inv = np.argsort(axes)
    return _result(x.data.transpose(axes), (x,), lambda g: x._accum(g.transpose(inv)))


def swapaxes(x, a1, a2) -> Tensor:
    axes = list(range(as_tensor(x).ndim))
    axes[a1], axes[a2] = axes[a2], axes[a1]
    return transpose(x, axes)


def getitem(x, idx) -> Tensor:
    x = as_tensor(x)

    def back(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g) if _fancy(idx) else full.__setitem__(idx, g)
        x._accum(full)

    return _result(x.data[idx], (x,), back)


def _fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        for t, part in zip(ts, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accum(part)

    return _result(np.concatenate([t.data for t in ts], axis=axis), ts, back)


def tsum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accum(np.broadcast_to(g, x.shape))

    return _result(x.data.sum(axis=axis, keepdims=keepdims), (x,), back)


def tmean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / n)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-D")

    def back(g):
        if a.requires_grad:
            a._accum(unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            b._accum(unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _result(a.data @ b.data, (a, b), back)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` over the last axis, flattening leading axes for BLAS."""
    x, weight = as_tensor(x), as_tensor(weight)
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    y = x2 @ weight.data
    if bias is not None:
        bias = as_tensor(bias)
        y = y + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        if x.requires_grad:
            x._accum((g2 @ weight.data.T).reshape(x.shape))
        if weight.requires_grad:
            weight._accum(x2.T @ g2)
        if bias is not None and bias.requires_grad:
            bias._accum(g2.sum(axis=0))

    return _result(y.reshape(*lead, weight.shape[1]), parents, back)


# ---------------------------------------------------------------- nn functions


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        x._accum(y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _result(y, (x,), back)


def layer_norm(x, gamma=None, beta=None, eps: float = 1e-9) -> Tensor:
    """Normalise over the last axis (population variance), then affine."""
    x = as_tensor(x)
    gamma = None if gamma is None else as_tensor(gamma)
    beta = None if beta is None else as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    g_arr = None if gamma is None else gamma.data
    y = xhat if g_arr is None else xhat * g_arr
    if beta is not None:
        y = y + beta.data
    parents = [x] + [p for p in (gamma, beta) if p is not None]

    def back(g):
        lead = tuple(range(g.ndim - 1))
        if beta is not None and beta.requires_grad:
            beta._accum(g.sum(axis=lead))
        if gamma is not None and gamma.requires_grad:
            gamma._accum((g * xhat).sum(axis=lead))
        if x.requires_grad:
            gx = g if g_arr is None else g * g_arr
            x._accum(inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True)))

    return _result(y, parents, back)


def dropout(x, p: float, rng: np.random.Generator | None, training: bool = True) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1/(1-p)``; identity when not training."""
    x = as_tensor(x)
    if not training or p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return _result(x.data * mask, (x,), lambda g: x._accum(g * mask))


def depthwise_conv1d(x, weight, bias=None) -> Tensor:
    """Per-channel 1-D cross-correlation along time with zero 'same' padding.

    ``x`` is ``(..., T, C)``, ``weight`` is ``(C, k)`` with odd ``k``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    C, k = weight.shape
    if k % 2 == 0:
        raise ConfigError(f"kernel size must be odd, got {k}")
    if x.shape[-1] != C:
        raise ShapeError(f"input has {x.shape[-1]} channels, kernel has {C}")
    T, h = x.shape[-2], k // 2
    pad = [(0, 0)] * (x.ndim - 2) + [(h, h), (0, 0)]
    xp = np.pad(x.data, pad)
    w = weight.data
    y = np.zeros(x.shape, dtype=np.result_type(x.data, w))
    for j in range(k):
        y += xp[..., j : j + T, :] * w[:, j]
    if bias is not None:
        bias = as_tensor(bias)
        y += bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        lead = tuple(range(g.ndim - 1))
        if bias is not None and bias.requires_grad:
            bias._accum(g.sum(axis=lead))
        if weight.requires_grad:
            gw = np.empty_like(w)
            for j in range(k):
                gw[:, j] = (xp[..., j : j + T, :] * g).sum(axis=lead)
            weight._accum(gw)
        if x.requires_grad:
            gp = np.zeros_like(xp)
            for j in range(k):
                gp[..., j : j + T, :] += g * w[:, j]
            x._accum(gp[..., h : h + T, :])

    return _result(y, parents, back)


def bce_with_logits(logits, labels) -> Tensor:
    """Mean binary cross-entropy on raw logits, ``max(z,0) - z*y + log1p(exp(-|z|))``."""
    z = as_tensor(logits)
    y = np.asarray(labels, dtype=z.dtype).reshape(z.shape)
    if not np.all((y == 0) | (y == 1)):
        raise ConfigError("labels must be 0 or 1")
    n = max(z.data.size, 1)
    loss = (np.maximum(z.data, 0) - z.data * y + np.log1p(np.exp(-np.abs(z.data)))).sum() / n
    return _result(np.asarray(loss), (z,), lambda g: z._accum(g * (_sigmoid(z.data) - y) / n))
