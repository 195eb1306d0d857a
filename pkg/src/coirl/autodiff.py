"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Every op records its parents and a backward rule on the output tensor, so
calling ``backward()`` on a scalar walks the recorded graph in reverse
topological order and accumulates gradients into ``requires_grad`` leaves.

Broadcasting is deliberately limited to scalar-with-tensor. Anything else
(bias rows, repeated policies) goes through an explicit op with its own
backward rule: ``linear``, ``broadcast_rows``.
"""

from __future__ import annotations

import contextlib
import math
import threading

import numpy as np


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError, ValueError):
    pass


class DomainError(AutodiffError, ValueError):
    pass


class ConfigurationError(AutodiffError, ValueError):
    pass


class NumericalError(AutodiffError, FloatingPointError):
    pass


_local = threading.local()


def _flags():
    if not hasattr(_local, "grad_enabled"):
        _local.grad_enabled = True
        _local.dtype = np.float32
    return _local


def get_default_dtype():
    return _flags().dtype


def set_default_dtype(dtype):
    _flags().dtype = np.dtype(dtype).type


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for new tensors (per thread)."""
    f = _flags()
    old = f.dtype
    f.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        f.dtype = old


@contextlib.contextmanager
def no_grad():
    f = _flags()
    old = f.grad_enabled
    f.grad_enabled = False
    try:
        yield
    finally:
        f.grad_enabled = old


def is_grad_enabled():
    return _flags().grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=get_default_dtype())
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    @classmethod
    def _from_op(cls, data, parents, backward, op):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- basic properties ---------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out._parents = ()
        out._backward = None
        out.op = "detach"
        return out

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- operators ------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(other, self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self):
        backward(self)


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def _lift(x, like):
    if isinstance(x, Tensor):
        return x
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(x, dtype=like.data.dtype)
    out.grad = None
    out.requires_grad = False
    out._parents = ()
    out._backward = None
    out.op = "const"
    return out


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _reduce_to(g, shape):
    """Collapse a gradient back onto a scalar operand when it was broadcast."""
    if g.shape == shape:
        return g
    return np.asarray(g.sum(dtype=np.float64), dtype=g.dtype).reshape(shape)


def _binary_shapes(a, b, opname):
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} differ (only scalar broadcast allowed)")


# -- elementwise ----------------------------------------------------------------

def add(a, b):
    a = _as_tensor(a)
    b = _lift(b, a)
    _binary_shapes(a, b, "add")
    sa, sb = a.shape, b.shape

    def bw(g):
        return _reduce_to(g, sa), _reduce_to(g, sb)

    return Tensor._from_op(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a = _as_tensor(a)
    b = _lift(b, a)
    _binary_shapes(a, b, "sub")
    sa, sb = a.shape, b.shape

    def bw(g):
        return _reduce_to(g, sa), _reduce_to(-g, sb)

    return Tensor._from_op(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a = _as_tensor(a)
    b = _lift(b, a)
    _binary_shapes(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return _reduce_to(g * bd, ad.shape), _reduce_to(g * ad, bd.shape)

    return Tensor._from_op(ad * bd, (a, b), bw, "mul")


def div(a, b):
    a = _as_tensor(a)
    b = _lift(b, a)
    _binary_shapes(a, b, "div")
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise DomainError("div: division by zero")
    out = ad / bd

    def bw(g):
        return _reduce_to(g / bd, ad.shape), _reduce_to(-g * out / bd, bd.shape)

    return Tensor._from_op(out, (a, b), bw, "div")


def neg(a):
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a):
    out = np.exp(a.data)
    if not np.all(np.isfinite(out)):
        raise NumericalError("exp overflow")
    return Tensor._from_op(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    x = a.data
    if np.any(x <= 0):
        raise DomainError("log of non-positive value")
    return Tensor._from_op(np.log(x), (a,), lambda g: (g / x,), "log")


def tanh(a):
    out = np.tanh(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * (1 - out * out),), "tanh")


def relu(a):
    pos = a.data > 0
    return Tensor._from_op(np.where(pos, a.data, 0).astype(a.data.dtype), (a,),
                           lambda g: (g * pos,), "relu")


def _softplus_np(x):
    return np.logaddexp(0, x).astype(x.dtype, copy=False)


def _sigmoid_np(x):
    return (0.5 * (1 + np.tanh(0.5 * x))).astype(x.dtype, copy=False)


def softplus(a):
    x = a.data
    return Tensor._from_op(_softplus_np(x), (a,), lambda g: (g * _sigmoid_np(x),), "softplus")


def bounded_softplus(a, lo, hi):
    """softplus followed by a clamp to [lo, hi]; zero gradient where clamped."""
    x = a.data
    sp = _softplus_np(x)
    out = np.clip(sp, lo, hi).astype(x.dtype, copy=False)
    inside = (sp >= lo) & (sp <= hi)

    def bw(g):
        return (g * _sigmoid_np(x) * inside,)

    return Tensor._from_op(out, (a,), bw, "bounded_softplus")


def square(a):
    x = a.data
    return Tensor._from_op(x * x, (a,), lambda g: (2 * g * x,), "square")


def abs_(a):
    x = a.data
    return Tensor._from_op(np.abs(x), (a,), lambda g: (g * np.sign(x),), "abs")


# -- reductions and shape ops ---------------------------------------------------

def sum_(a, axis=None):
    x = a.data
    out = np.asarray(x.sum(axis=axis, dtype=np.float64), dtype=x.dtype)
    shape = x.shape

    def bw(g):
        if axis is None:
            return (np.full(shape, g, dtype=x.dtype),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).astype(x.dtype),)

    return Tensor._from_op(out, (a,), bw, "sum")


def mean(a):
    x = a.data
    n = x.size
    out = np.asarray(x.sum(dtype=np.float64) / n, dtype=x.dtype)
    shape = x.shape
    return Tensor._from_op(out, (a,), lambda g: (np.full(shape, g / n, dtype=x.dtype),), "mean")


def reshape(a, shape):
    old = a.shape
    return Tensor._from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a):
    if a.ndim != 2:
        raise ShapeError("transpose expects a 2D tensor")
    return Tensor._from_op(a.data.T, (a,), lambda g: (g.T,), "transpose")


def index(a, idx):
    shape, dtype = a.shape, a.data.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor._from_op(a.data[idx], (a,), bw, "index")


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    out = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor._from_op(out, tuple(tensors), bw, "concat")


def broadcast_rows(a, count):
    """Stack ``count`` copies of ``a`` along a new leading axis."""
    x = a.data
    out = np.broadcast_to(x, (count,) + x.shape).copy()

    def bw(g):
        return (np.asarray(g.sum(axis=0, dtype=np.float64), dtype=x.dtype),)

    return Tensor._from_op(out, (a,), bw, "broadcast_rows")


# -- linear algebra ---------------------------------------------------------------

def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return g @ bd.T, ad.T @ g

    return Tensor._from_op(ad @ bd, (a, b), bw, "matmul")


def linear(x, w, b=None):
    """x @ w + b with b added to every row of the product."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: incompatible shapes {x.shape} x {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias shape {b.shape} != ({w.shape[1]},)")
    xd, wd = x.data, w.data
    out = xd @ wd
    if b is None:
        return Tensor._from_op(out, (x, w), lambda g: (g @ wd.T, xd.T @ g), "linear")
    out = out + b.data

    def bw(g):
        return g @ wd.T, xd.T @ g, np.asarray(g.sum(axis=0, dtype=np.float64), dtype=g.dtype)

    return Tensor._from_op(out, (x, w, b), bw, "linear")


def masked_softmax(scores, mask):
    """Row softmax where ``mask[i, j]`` True excludes column j from row i."""
    x = scores.data
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise ShapeError(f"mask shape {mask.shape} != scores shape {x.shape}")
    if np.any(mask.all(axis=-1)):
        raise ConfigurationError("masked_softmax: a row has every position masked")
    z = np.where(mask, -np.inf, x)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = (e / e.sum(axis=-1, keepdims=True)).astype(x.dtype)

    def bw(g):
        inner = (g * p).sum(axis=-1, keepdims=True)
        return (p * (g - inner),)

    return Tensor._from_op(p, (scores,), bw, "masked_softmax")


def masked_attention(q, k, v, mask):
    """softmax(q kᵀ / sqrt(d), masked) @ v.

    ``mask[i][j]`` True means query i may not attend key j.
    """
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ShapeError("masked_attention expects 2D q, k, v")
    if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise ShapeError(f"masked_attention: q{q.shape} k{k.shape} v{v.shape}")
    scores = matmul(q, transpose(k)) * (1.0 / math.sqrt(q.shape[1]))
    return matmul(masked_softmax(scores, mask), v)


def attention_mask(n, mode):
    """Boolean block-mask for self-attention over ``n`` rows."""
    ones = np.ones((n, n), dtype=bool)
    if mode == "none":
        return np.zeros((n, n), dtype=bool)
    if mode == "causal":
        return np.triu(ones, 1)
    if mode == "inverse_causal":
        return np.tril(ones, -1)
    raise ConfigurationError(f"unknown mask mode {mode!r}")


# -- losses -------------------------------------------------------------------------

def mse(pred, target):
    target = _lift(target, pred)
    return mean(square(sub(pred, target)))


# -- backward -----------------------------------------------------------------------

def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if loss.size != 1:
        raise AutodiffError(f"backward() needs a scalar root, got shape {loss.shape}")
    if not np.all(np.isfinite(loss.data)):
        raise NumericalError("non-finite loss")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient reached a leaf of shape {node.shape}")
            g = np.asarray(g, dtype=node.data.dtype).reshape(node.shape)
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def numerical_gradient(fn, x, h=1e-3):
    """Central-difference gradient of scalar ``fn()`` with respect to ``x.data``."""
    grad = np.zeros(x.shape, dtype=np.float64)
    flat = x.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(fn().data)
            flat[i] = orig - h
            fm = float(fn().data)
            flat[i] = orig
            grad.reshape(-1)[i] = (fp - fm) / (2 * h)
    return grad


def gradient_relative_error(analytic, numeric):
    """Max elementwise error scaled by magnitude (floored at 1)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
    return float(np.max(np.abs(a - n) / scale)) if a.size else 0.0
