"""Reverse-mode automatic differentiation on numpy arrays.

A ``Tensor`` wraps an ndarray together with a gradient accumulator and the
closure that routes gradients to its parents. Calling ``backward()`` on a
scalar tensor walks the graph once in reverse topological order. Float32 is
the working precision for training; gradient-check tests build float64
tensors instead, and every op preserves the dtype of its inputs.
"""

import itertools

import numpy as np

DEFAULT_DTYPE = np.float32

_node_ids = itertools.count()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "_parents", "_backward_fn", "_needs_grad")

    def __init__(self, data, requires_grad=False, _parents=(), _backward_fn=None):
        if isinstance(data, (np.ndarray, np.generic)):
            arr = np.asarray(data)
            self.data = arr if arr.dtype.kind == "f" else arr.astype(DEFAULT_DTYPE)
        else:
            self.data = np.asarray(data, dtype=DEFAULT_DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self.node_id = next(_node_ids)
        self._parents = _parents
        self._backward_fn = _backward_fn
        self._needs_grad = requires_grad or any(p._needs_grad for p in _parents)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def grad_or_zeros(self):
        return self.grad if self.grad is not None else np.zeros_like(self.data)

    def backward(self):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``.

        ``self`` must be scalar. Intermediate-node grads are cleared before
        the pass; leaf grads are not, so repeated calls accumulate.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar, got shape {self.data.shape}")
        topo = _toposort(self)
        for node in topo:
            if node._parents:
                node.grad = None
        _accumulate(self, np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return add(-self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / np.asarray(other, dtype=self.dtype))

    def __pow__(self, p):
        return pow_const(self, p)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def item(self):
        return float(self.data.reshape(-1)[0])


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def parameter(data, dtype=None):
    """Leaf tensor that participates in optimisation."""
    arr = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
    return Tensor(arr.copy(), requires_grad=True)


def _toposort(root):
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
    return order


def _accumulate(t, g):
    if not t._needs_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _make(data, parents, backward_fn):
    needs = any(p._needs_grad for p in parents)
    return Tensor(data, _parents=parents if needs else (), _backward_fn=backward_fn if needs else None)


# -- elementwise arithmetic ---------------------------------------------


def add(a, b):
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    out_data = a.data + b.data

    def backward_fn(g):
        if a._needs_grad:
            _accumulate(a, _unbroadcast(g, a.data.shape))
        if b._needs_grad:
            _accumulate(b, _unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), backward_fn)


def mul(a, b):
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    out_data = a.data * b.data

    def backward_fn(g):
        if a._needs_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        if b._needs_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), backward_fn)


def reciprocal(x):
    x = as_tensor(x)
    out_data = 1.0 / x.data

    def backward_fn(g):
        _accumulate(x, -g * out_data * out_data)

    return _make(out_data, (x,), backward_fn)


def pow_const(x, p):
    """x**p for a fixed scalar exponent."""
    x = as_tensor(x)
    p = float(p)
    out_data = x.data ** p

    def backward_fn(g):
        _accumulate(x, g * p * x.data ** (p - 1.0))

    return _make(out_data, (x,), backward_fn)


def exp(x):
    x = as_tensor(x)
    out_data = np.exp(x.data)

    def backward_fn(g):
        _accumulate(x, g * out_data)

    return _make(out_data, (x,), backward_fn)


def log(x):
    x = as_tensor(x)
    out_data = np.log(x.data)

    def backward_fn(g):
        _accumulate(x, g / x.data)

    return _make(out_data, (x,), backward_fn)


def tanh(x):
    x = as_tensor(x)
    out_data = np.tanh(x.data)

    def backward_fn(g):
        _accumulate(x, g * (1.0 - out_data * out_data))

    return _make(out_data, (x,), backward_fn)


def sigmoid(x):
    x = as_tensor(x)
    out_data = _sigmoid(x.data)

    def backward_fn(g):
        _accumulate(x, g * out_data * (1.0 - out_data))

    return _make(out_data, (x,), backward_fn)


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def leaky_relu(x, slope=0.01):
    x = as_tensor(x)
    grad_scale = np.where(x.data > 0, np.asarray(1.0, x.dtype), np.asarray(slope, x.dtype))
    out_data = x.data * grad_scale

    def backward_fn(g):
        _accumulate(x, g * grad_scale)

    return _make(out_data, (x,), backward_fn)


def clamp_min0(x):
    """max(x, 0); gradient passes only where x > 0."""
    x = as_tensor(x)
    out_data = np.maximum(x.data, 0)

    def backward_fn(g):
        _accumulate(x, g * (x.data > 0))

    return _make(out_data, (x,), backward_fn)


# -- shape ops -----------------------------------------------------------


def reshape(x, shape):
    x = as_tensor(x)
    out_data = x.data.reshape(shape)

    def backward_fn(g):
        _accumulate(x, g.reshape(x.data.shape))

    return _make(out_data, (x,), backward_fn)


def concat(tensors, axis=1):
    tensors = [as_tensor(t) for t in tensors]
    base = tensors[0].data.shape
    for t in tensors[1:]:
        other = t.data.shape
        if len(other) != len(base) or any(o != b for i, (o, b) in enumerate(zip(other, base)) if i != axis):
            raise ShapeError(f"concat: incompatible shapes {base} vs {other} along axis {axis}")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + [t.data.shape[axis] for t in tensors])

    def backward_fn(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t._needs_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accumulate(t, g[tuple(idx)])

    return _make(out_data, tuple(tensors), backward_fn)


def narrow(x, axis, start, length):
    """Contiguous slice along one axis."""
    x = as_tensor(x)
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out_data = np.ascontiguousarray(x.data[idx])

    def backward_fn(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        _accumulate(x, full)

    return _make(out_data, (x,), backward_fn)


# -- reductions ----------------------------------------------------------


def tsum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    out_data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if axis is None:
            _accumulate(x, np.broadcast_to(g, x.data.shape).copy() if np.ndim(g) == 0 else np.full_like(x.data, g))
        else:
            if not keepdims:
                g = np.expand_dims(g, axis)
            _accumulate(x, np.broadcast_to(g, x.data.shape))

    return _make(out_data, (x,), backward_fn)


def tmean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.data.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / float(n))


# -- image-valued primitives ----------------------------------------------


def pow_tensor(x, p, eps=1e-6):
    """Elementwise x**p with a tensor exponent broadcast over x.

    The base is clamped to ``eps`` so the power and its partials stay finite,
    except that exactly-zero entries of x map to 0 and contribute nothing to
    the exponent gradient. Negative bases are rejected.
    """
    x = as_tensor(x)
    p = as_tensor(p, x.dtype)
    if np.any(x.data < 0):
        raise ValueError("pow_tensor: negative base")
    zero = x.data == 0
    xc = np.maximum(x.data, np.asarray(eps, x.dtype))
    out_data = xc ** p.data
    out_data[np.broadcast_to(zero, out_data.shape)] = 0.0

    def backward_fn(g):
        if x._needs_grad:
            dx = g * p.data * xc ** (p.data - 1.0)
            _accumulate(x, _unbroadcast(dx, x.data.shape))
        if p._needs_grad:
            dp = g * out_data * np.log(xc)
            _accumulate(p, _unbroadcast(dp, p.data.shape))

    return _make(out_data, (x, p), backward_fn)


def channel_matmul(m, x):
    """Per-item channel mix: out[n,i] = sum_j m[n,i,j] * x[n,j] over (H,W) maps."""
    m = as_tensor(m)
    x = as_tensor(x)
    n, c = x.data.shape[0], x.data.shape[1]
    if m.data.shape != (n, c, c):
        raise ShapeError(f"channel_matmul: matrix {m.data.shape} does not fit image channels {x.data.shape}")
    out_data = np.einsum("nij,njhw->nihw", m.data, x.data)

    def backward_fn(g):
        if m._needs_grad:
            _accumulate(m, np.einsum("nihw,njhw->nij", g, x.data))
        if x._needs_grad:
            _accumulate(x, np.einsum("nij,nihw->njhw", m.data, g))

    return _make(out_data, (m, x), backward_fn)


def area_resize_weights(src, dst, dtype=np.float64):
    """Row-weight matrix for exact box-overlap area resampling (dst x src)."""
    w = np.zeros((dst, src), dtype=dtype)
    scale = src / dst
    for i in range(dst):
        lo, hi = i * scale, (i + 1) * scale
        j0, j1 = int(np.floor(lo)), int(np.ceil(hi))
        for j in range(j0, min(j1, src)):
            w[i, j] = min(hi, j + 1) - max(lo, j)
    return w / scale


def area_resize(x, size):
    """Area-averaging resize of (..., H, W) maps to ``size`` = (h, w)."""
    x = as_tensor(x)
    th, tw = size
    h, w = x.data.shape[-2:]
    if (h, w) == (th, tw):
        return x
    wa = area_resize_weights(h, th).astype(x.dtype)
    wb = area_resize_weights(w, tw).astype(x.dtype)
    out_data = np.einsum("ih,...hw,jw->...ij", wa, x.data, wb, optimize=True)

    def backward_fn(g):
        _accumulate(x, np.einsum("ih,...ij,jw->...hw", wa, g, wb, optimize=True))

    return _make(out_data, (x,), backward_fn)
