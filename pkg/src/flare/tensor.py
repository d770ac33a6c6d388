"""Dense tensors with a small reverse-mode differentiation tape.

Every array is a numpy ndarray (float32 or float64) wrapped in :class:`Tensor`.
Operations record a node holding their inputs and the activations needed by
the backward rule; :meth:`Tensor.backward` replays the recorded nodes in
reverse topological order.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np
from scipy.special import erf

from .errors import DimensionError, InvalidValueError

SINGLE = np.float32
DOUBLE = np.float64

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_float_array(data, dtype=None):
    arr = np.asarray(data)
    if dtype is not None:
        return np.asarray(arr, dtype=dtype, order="C")
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    return np.asarray(arr, order="C")


class Tensor:
    """A numpy array plus the bookkeeping for reverse-mode differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _as_float_array(data, dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

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

    def __truediv__(self, other):
        return mul(self, 1.0 / other) if np.isscalar(other) else div(self, other)

    def sum(self):
        return sum_all(self)

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not _needs_grad(parent):
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _needs_grad(t):
    return t.requires_grad or t._backward is not None


def _topo_order(root):
    order, seen = [], set()
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


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _check_finite(arr, op):
    if not np.isfinite(arr).all():
        raise InvalidValueError(f"non-finite value produced by {op}")


def _make(data, op, parents, backward):
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    out.op = op
    if _grad_enabled and any(_needs_grad(p) for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _operand(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


# ----------------------------------------------------------------------------
# elementwise
# ----------------------------------------------------------------------------

def add(a, b):
    a = as_tensor(a)
    b = _operand(b, a)
    a_shape, b_shape = a.shape, b.shape
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"add: cannot broadcast {a_shape} with {b_shape}") from exc

    def backward(g):
        return unbroadcast(g, a_shape), unbroadcast(g, b_shape)

    return _make(out, "add", (a, b), backward)


def sub(a, b):
    a = _operand(a, b) if isinstance(b, Tensor) and not isinstance(a, Tensor) else as_tensor(a)
    b = _operand(b, a)
    a_shape, b_shape = a.shape, b.shape
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise DimensionError(f"sub: cannot broadcast {a_shape} with {b_shape}") from exc

    def backward(g):
        return unbroadcast(g, a_shape), unbroadcast(-g, b_shape)

    return _make(out, "sub", (a, b), backward)


def mul(a, b):
    a = as_tensor(a)
    if np.isscalar(b):
        s = b

        def backward_scalar(g):
            return (g * s,)

        return _make(a.data * a.dtype.type(s), "scale", (a,), backward_scalar)
    b = _operand(b, a)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"mul: cannot broadcast {a.shape} with {b.shape}") from exc

    def backward(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return _make(out, "mul", (a, b), backward)


def div(a, b):
    a = as_tensor(a)
    b = _operand(b, a)
    out = a.data / b.data

    def backward(g):
        return (unbroadcast(g / b.data, a.shape),
                unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(out, "div", (a, b), backward)


def sqrt(a):
    a = as_tensor(a)
    if (a.data < 0).any():
        raise InvalidValueError("sqrt of negative value")
    out = np.sqrt(a.data)

    def backward(g):
        return (g * 0.5 / out,)

    return _make(out, "sqrt", (a,), backward)


def square(a):
    a = as_tensor(a)

    def backward(g):
        return (2.0 * g * a.data,)

    return _make(a.data * a.data, "square", (a,), backward)


def sum_all(a):
    a = as_tensor(a)

    def backward(g):
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(a.data.sum(), dtype=a.dtype), "sum", (a,), backward)


def sum_axes(a, axis):
    """Sum over ``axis`` (int or tuple) without keeping the reduced dims."""
    a = as_tensor(a)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(ax % a.ndim for ax in axes)

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axes), a.shape).copy(),)

    return _make(a.data.sum(axis=axes), "sum_axes", (a,), backward)


def mean(a):
    a = as_tensor(a)
    return mul(sum_all(a), 1.0 / a.data.size)


def gelu(x):
    """Exact GELU, ``x * Phi(x)`` with Phi the standard normal CDF."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data / math.sqrt(2.0)))
    out = x.data * cdf

    def backward(g):
        pdf = np.exp(-0.5 * x.data * x.data) / math.sqrt(2.0 * math.pi)
        return (g * (cdf + x.data * pdf),)

    return _make(out.astype(x.dtype, copy=False), "gelu", (x,), backward)


# ----------------------------------------------------------------------------
# linear algebra and shape ops
# ----------------------------------------------------------------------------

def matmul(a, b):
    """Batched matrix product over the last two axes, with numpy broadcasting."""
    a = as_tensor(a)
    b = _operand(b, a)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if _needs_grad(a) else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if _needs_grad(b) else None
        return (None if ga is None else unbroadcast(ga, a.shape),
                None if gb is None else unbroadcast(gb, b.shape))

    return _make(out, "matmul", (a, b), backward)


def transpose(a):
    """Swap the last two axes."""
    a = as_tensor(a)

    def backward(g):
        return (np.swapaxes(g, -1, -2),)

    return _make(np.ascontiguousarray(np.swapaxes(a.data, -1, -2)), "transpose", (a,), backward)


def reshape(a, shape):
    a = as_tensor(a)
    in_shape = a.shape

    def backward(g):
        return (g.reshape(in_shape),)

    return _make(a.data.reshape(shape), "reshape", (a,), backward)


def stack(tensors):
    """Stack equally shaped tensors along a new leading axis."""
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors])

    def backward(g):
        return tuple(g[i] for i in range(len(tensors)))

    return _make(out, "stack", tuple(tensors), backward)


def linear(x, weight, bias=None):
    """``x @ weight + bias`` with weight stored as (in, out)."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# ----------------------------------------------------------------------------
# normalization
# ----------------------------------------------------------------------------

def row_softmax(s):
    """Softmax along the last axis, stabilized by a per-row max shift."""
    s = as_tensor(s)
    if np.isnan(s.data).any():
        raise InvalidValueError("row_softmax: NaN in input")
    z = s.data - s.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, "row_softmax", (s,), backward)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize each row over the last axis (population variance), then scale and shift."""
    x = as_tensor(x)
    gamma = _operand(gamma, x)
    beta = _operand(beta, x)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"layer_norm: gamma/beta must have shape ({c},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    out = xhat * gamma.data + beta.data

    def backward(g):
        red = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=red)
        dbeta = g.sum(axis=red)
        dxhat = g * gamma.data
        dx = inv_std * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, dgamma, dbeta

    return _make(out.astype(x.dtype, copy=False), "layer_norm", (x, gamma, beta), backward)
