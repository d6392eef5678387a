"""Dense reverse-mode automatic differentiation on top of numpy.

Every op builds its output eagerly and, if any input requires a gradient,
records a vector-Jacobian closure. ``backward`` sorts the recorded graph
topologically and sweeps it once in reverse. Gradients are returned fresh
on every call, so repeating a backward pass over the same graph gives
bit-identical results.

All data is float64.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np

from .errors import DomainError, ShapeError


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._vjp = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


_state = threading.local()


def grad_enabled():
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording them (per thread)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, vjp):
    out = Tensor(data)
    if not grad_enabled():
        return out
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# -- elementwise binary ------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), vjp)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), vjp)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), vjp)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), vjp)


# -- elementwise unary -------------------------------------------------------

def scale(a, c):
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def square(a):
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def tabs(a):
    """Absolute value; the subgradient at exactly 0 is taken as 0."""
    a = as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def sigmoid(a):
    a = as_tensor(a)
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),))


def relu(a):
    a = as_tensor(a)
    keep = a.data > 0
    return _make(np.where(keep, a.data, 0.0), (a,), lambda g: (np.where(keep, g, 0.0),))


def exp(a):
    a = as_tensor(a)
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,))


def log(a):
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log of non-positive value")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def reciprocal(a):
    a = as_tensor(a)
    if np.any(a.data == 0):
        raise DomainError("reciprocal of zero")
    y = 1.0 / a.data
    return _make(y, (a,), lambda g: (-g * y * y,))


def clamp(a, lo, hi):
    """Clip to [lo, hi]; no gradient flows where the bound is active."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (np.where(inside, g, 0.0),))


def hinge(a):
    """max(0, a), same as relu but named for penalty terms."""
    return relu(a)


# -- reductions and shape ----------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), vjp)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape):
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes):
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in tensors]) from None
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(out, tuple(tensors), vjp)


def gather(a, index, axis=0):
    """Select slices of ``a`` along ``axis``; repeated indices accumulate."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)
    if index.size and (index.min() < -a.shape[axis] or index.max() >= a.shape[axis]):
        raise ShapeError("gather", a.shape, index.shape)
    out = np.take(a.data, index, axis=axis)

    def vjp(g):
        full = np.zeros_like(a.data)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, index, np.moveaxis(g, axis, 0))
        return (full,)

    return _make(out, (a,), vjp)


# -- neural-network building blocks -----------------------------------------

def masked_softmax(scores, mask):
    """Softmax over the last axis restricted to positions where ``mask`` holds.

    Masked positions get weight exactly 0 and receive exactly 0 gradient.
    """
    scores = as_tensor(scores)
    mask = np.asarray(mask, dtype=bool)
    try:
        full = np.broadcast_to(mask, scores.shape)
    except ValueError:
        raise ShapeError("masked_softmax", scores.shape, mask.shape) from None
    if not np.all(full.any(axis=-1)):
        raise DomainError("masked_softmax: a row has no unmasked position")
    s = np.where(full, scores.data, -np.inf)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.where(full, np.exp(s), 0.0)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (scores,), vjp)


def softmax(scores):
    scores = as_tensor(scores)
    return masked_softmax(scores, np.ones(scores.shape, dtype=bool))


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalise over the last axis, then apply elementwise gain and offset."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ShapeError("layer_norm", x.shape, gain.shape, bias.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    lead = tuple(range(x.ndim - 1))

    def vjp(g):
        gx_hat = g * gain.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, (x, gain, bias), vjp)


def _pool_mask(x, axis, mask):
    mask = np.asarray(mask, dtype=bool)
    axis = axis % x.ndim
    if mask.shape != x.shape[: axis + 1]:
        raise ShapeError("pool", x.shape, mask.shape)
    if not np.all(mask.any(axis=axis)):
        raise DomainError("pool: nothing to pool over (all positions masked)")
    return mask.reshape(mask.shape + (1,) * (x.ndim - axis - 1)), axis


def mean_pool(x, axis, mask):
    """Average over ``axis`` using only positions where ``mask`` is true."""
    x = as_tensor(x)
    m, axis = _pool_mask(x, axis, mask)
    w = m / m.sum(axis=axis, keepdims=True)
    out = np.where(m, x.data, 0.0).sum(axis=axis) / m.sum(axis=axis)

    def vjp(g):
        return (np.expand_dims(g, axis) * w,)

    return _make(out, (x,), vjp)


def max_pool(x, axis, mask):
    """Maximum over ``axis`` among unmasked positions (first index wins ties)."""
    x = as_tensor(x)
    m, axis = _pool_mask(x, axis, mask)
    vals = np.where(m, x.data, -np.inf)
    arg = np.expand_dims(vals.argmax(axis=axis), axis)
    out = np.take_along_axis(vals, arg, axis=axis).squeeze(axis)

    def vjp(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, arg, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _make(out, (x,), vjp)


# -- backward ----------------------------------------------------------------

class Tape:
    """Graph reachable from a scalar output, in topological order."""

    def __init__(self, root):
        root = as_tensor(root)
        self.root = root
        self.nodes = self._toposort(root)

    @staticmethod
    def _toposort(root):
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
            for p in reversed(node._parents):
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return order

    def __len__(self):
        return len(self.nodes)

    def backward(self):
        """Return {id(leaf): gradient} and set ``.grad`` on every leaf."""
        root = self.root
        if root.data.size != 1:
            raise ShapeError("backward (loss must be scalar)", root.shape)
        grads = {id(root): np.ones_like(root.data)}
        leaves = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is None:
                leaves[id(node)] = g
                node.grad = g
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        return leaves


def backward(loss):
    """Reverse sweep from a scalar ``loss``; returns {id(leaf): grad}."""
    return Tape(loss).backward()


def grad_of(loss, params):
    """Gradients of ``loss`` for each tensor in ``params`` (zeros if unused)."""
    got = backward(loss)
    return [got.get(id(p), np.zeros_like(p.data)) for p in params]
