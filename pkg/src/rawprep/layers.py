"""Neural-net building blocks on top of the autodiff engine.

Convolution lowers to im2col plus one batched GEMM per layer, which is where
nearly all training time goes, so both directions reuse the stored column
buffer. Losses are fused (stable elementwise form plus reduction in one node)
to keep graphs small. Modules register parameters and persistent state in
insertion order; that order is the checkpoint layout contract.
"""

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor, _accumulate, _make, as_tensor

LEAKY_SLOPE = 0.01


# -- functional ops -------------------------------------------------------


def _im2col(xp, kh, kw, stride, hout, wout):
    n, cin = xp.shape[:2]
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3))
    return cols.reshape(n, cin * kh * kw, hout * wout)


def conv2d(x, w, b=None, stride=1, padding=0):
    """2d cross-correlation: x (N,Cin,H,W) with w (Cout,Cin,kh,kw)."""
    x = as_tensor(x)
    w = as_tensor(w, x.dtype)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: need 4d operands, got {x.data.shape} and {w.data.shape}")
    n, cin, h, wd = x.data.shape
    cout, cin_w, kh, kw = w.data.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d: input has {cin} channels but weight expects {cin_w}")
    hout = (h + 2 * padding - kh) // stride + 1
    wout = (wd + 2 * padding - kw) // stride + 1
    if hout <= 0 or wout <= 0:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} does not fit input {h}x{wd} with padding {padding}")
    if padding:
        xp = np.zeros((n, cin, h + 2 * padding, wd + 2 * padding), dtype=x.dtype)
        xp[:, :, padding:padding + h, padding:padding + wd] = x.data
    else:
        xp = x.data
    # pointwise stride-1 convs need no patch extraction or gradient scatter
    direct = kh == 1 and kw == 1 and stride == 1
    if direct:
        cols = xp.reshape(n, cin, hout * wout)
    else:
        cols = _im2col(xp, kh, kw, stride, hout, wout)
    wmat = w.data.reshape(cout, -1)
    out_data = np.matmul(wmat, cols).reshape(n, cout, hout, wout)
    parents = (x, w)
    if b is not None:
        b = as_tensor(b, x.dtype)
        if b.data.shape != (cout,):
            raise ShapeError(f"conv2d: bias shape {b.data.shape} != ({cout},)")
        out_data = out_data + b.data[:, None, None]
        parents = (x, w, b)

    def backward_fn(g):
        gl = g.reshape(n, cout, hout * wout)
        if w._needs_grad:
            # (K, HW) x (HW, cout) keeps the tall GEMM side large for skinny cout
            dw = np.matmul(cols, gl.transpose(0, 2, 1)).sum(axis=0).T
            _accumulate(w, dw.reshape(w.data.shape))
        if b is not None and b._needs_grad:
            _accumulate(b, g.sum(axis=(0, 2, 3)))
        if x._needs_grad:
            if direct:
                dxp = np.matmul(wmat.T, gl).reshape(n, cin, hout, wout)
            elif stride == 1 and cout < cin:
                # shrinking convs: correlate the padded grad with flipped
                # weights in one GEMM instead of scattering dcols
                gpad = np.zeros((n, cout, hout + 2 * (kh - 1), wout + 2 * (kw - 1)), dtype=g.dtype)
                gpad[:, :, kh - 1:kh - 1 + hout, kw - 1:kw - 1 + wout] = g.reshape(n, cout, hout, wout)
                gcols = _im2col(gpad, kh, kw, 1, h + 2 * padding, wd + 2 * padding)
                wflip = np.ascontiguousarray(
                    w.data.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1]).reshape(cin, cout * kh * kw)
                dxp = np.matmul(wflip, gcols).reshape(n, cin, h + 2 * padding, wd + 2 * padding)
            else:
                dcols = np.matmul(wmat.T, gl).reshape(n, cin, kh, kw, hout, wout)
                dxp = np.zeros_like(xp)
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, :, i:i + stride * hout:stride, j:j + stride * wout:stride] += dcols[:, :, i, j]
            _accumulate(x, dxp[:, :, padding:padding + h, padding:padding + wd] if padding else dxp)

    return _make(out_data, parents, backward_fn)


def batch_norm_train(x, gamma, beta, eps=1e-5):
    """Training-mode batch norm over (N,H,W) per channel.

    Uses the biased variance both for normalisation and for the returned
    batch statistics, so saved running stats reproduce eval outputs exactly.
    Returns (out, batch_mean, batch_var) with the stats as plain arrays.
    """
    x = as_tensor(x)
    gamma = as_tensor(gamma, x.dtype)
    beta = as_tensor(beta, x.dtype)
    if x.data.ndim != 4:
        raise ShapeError(f"batch_norm: need (N,C,H,W), got {x.data.shape}")
    n, c, h, wd = x.data.shape
    m = n * h * wd
    if m < 2:
        raise ShapeError("batch_norm: need more than one value per channel in training mode")
    axes = (0, 2, 3)
    mean = x.data.mean(axis=axes)
    xhat = x.data - mean[:, None, None]
    var = np.einsum("nchw,nchw->c", xhat, xhat) / m
    invstd = 1.0 / np.sqrt(var + eps)
    xhat *= invstd[:, None, None]
    out_data = gamma.data[:, None, None] * xhat + beta.data[:, None, None]

    def backward_fn(g):
        if gamma._needs_grad:
            _accumulate(gamma, np.einsum("nchw,nchw->c", g, xhat))
        if beta._needs_grad:
            _accumulate(beta, g.sum(axis=axes))
        if x._needs_grad:
            dxhat = g * gamma.data[:, None, None]
            s1 = np.einsum("nchw->c", dxhat)
            s2 = np.einsum("nchw,nchw->c", dxhat, xhat)
            scale = invstd / m
            dx = dxhat * invstd[:, None, None]
            dx -= xhat * (s2 * scale)[:, None, None]
            dx -= (s1 * scale)[:, None, None]
            _accumulate(x, dx)

    return _make(out_data, (x, gamma, beta), backward_fn), mean, var


def batch_norm_eval(x, gamma, beta, running_mean, running_var, eps=1e-5):
    """Eval-mode batch norm: affine map using stored statistics."""
    x = as_tensor(x)
    gamma = as_tensor(gamma, x.dtype)
    beta = as_tensor(beta, x.dtype)
    invstd = (1.0 / np.sqrt(running_var + eps)).astype(x.dtype)
    scale = gamma * Tensor(invstd)
    shift = beta - scale * Tensor(running_mean.astype(x.dtype))
    return x * ad.reshape(scale, (1, -1, 1, 1)) + ad.reshape(shift, (1, -1, 1, 1))


def max_pool2(x):
    """2x2 max pooling, stride 2. Ties go to the first max in row-major window order."""
    x = as_tensor(x)
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2: spatial dims must be even, got {h}x{w}")
    corners = (x.data[:, :, 0::2, 0::2], x.data[:, :, 0::2, 1::2],
               x.data[:, :, 1::2, 0::2], x.data[:, :, 1::2, 1::2])
    out_data = np.maximum(np.maximum(corners[0], corners[1]),
                          np.maximum(corners[2], corners[3]))

    def backward_fn(g):
        dx = np.zeros_like(x.data)
        slots = (dx[:, :, 0::2, 0::2], dx[:, :, 0::2, 1::2],
                 dx[:, :, 1::2, 0::2], dx[:, :, 1::2, 1::2])
        taken = corners[0] == out_data
        np.copyto(slots[0], g, where=taken)
        for corner, slot in zip(corners[1:3], slots[1:3]):
            hit = (corner == out_data) & ~taken
            np.copyto(slot, g, where=hit)
            taken |= hit
        # whatever the first three did not claim must be the last corner's max
        np.copyto(slots[3], g, where=~taken)
        _accumulate(x, dx)

    return _make(out_data, (x,), backward_fn)


def global_avg_pool(x):
    """Mean over the spatial dims: (N,C,H,W) -> (N,C)."""
    x = as_tensor(x)
    n, c, h, w = x.data.shape
    out_data = x.data.mean(axis=(2, 3))

    def backward_fn(g):
        _accumulate(x, np.broadcast_to(g[:, :, None, None] / (h * w), x.data.shape).astype(x.dtype))

    return _make(out_data, (x,), backward_fn)


def linear(x, w, b=None):
    """Affine map: x (N,F) with w (O,F) -> (N,O)."""
    x = as_tensor(x)
    w = as_tensor(w, x.dtype)
    if x.data.ndim != 2 or x.data.shape[1] != w.data.shape[1]:
        raise ShapeError(f"linear: {x.data.shape} does not match weight {w.data.shape}")
    out_data = x.data @ w.data.T
    parents = (x, w)
    if b is not None:
        b = as_tensor(b, x.dtype)
        out_data = out_data + b.data
        parents = (x, w, b)

    def backward_fn(g):
        if x._needs_grad:
            _accumulate(x, g @ w.data)
        if w._needs_grad:
            _accumulate(w, g.T @ x.data)
        if b is not None and b._needs_grad:
            _accumulate(b, g.sum(axis=0))

    return _make(out_data, parents, backward_fn)


# -- fused losses ----------------------------------------------------------


def _loss_reduce(elem, weights):
    if weights is None:
        return elem.mean(), None
    if weights.shape != elem.shape:
        raise ShapeError(f"loss weights {weights.shape} != loss terms {elem.shape}")
    return (elem * weights).sum(), weights


def bce_with_logits(logits, targets, weights=None):
    """Binary cross-entropy on logits; mean, or weighted sum if weights given.

    ``targets`` and ``weights`` are constant arrays, not graph nodes.
    """
    z = as_tensor(logits)
    y = np.asarray(targets, dtype=z.dtype)
    elem = np.maximum(z.data, 0) - z.data * y + np.log1p(np.exp(-np.abs(z.data)))
    out_data, wmap = _loss_reduce(elem, weights)

    def backward_fn(g):
        delem = ad._sigmoid(z.data) - y
        scale = wmap if wmap is not None else 1.0 / elem.size
        _accumulate(z, g * delem * scale)

    return _make(np.asarray(out_data, dtype=z.dtype), (z,), backward_fn)


def softmax_cross_entropy(logits, onehot, axis=1, weights=None):
    """Cross-entropy of softmax(logits) against constant one-hot targets.

    The class axis is reduced; ``weights`` matches the remaining shape.
    """
    z = as_tensor(logits)
    y = np.asarray(onehot, dtype=z.dtype)
    if y.shape != z.data.shape:
        raise ShapeError(f"softmax_cross_entropy: targets {y.shape} != logits {z.data.shape}")
    zmax = z.data.max(axis=axis, keepdims=True)
    ez = np.exp(z.data - zmax)
    sez = ez.sum(axis=axis, keepdims=True)
    lse = np.log(sez) + zmax
    elem = lse.take(0, axis=axis) - np.sum(y * z.data, axis=axis)
    out_data, wmap = _loss_reduce(elem, weights)

    def backward_fn(g):
        soft = ez / sez
        if wmap is None:
            _accumulate(z, g * (soft - y) / elem.size)
        else:
            _accumulate(z, g * (soft - y) * np.expand_dims(wmap, axis))

    return _make(np.asarray(out_data, dtype=z.dtype), (z,), backward_fn)


def smooth_l1(pred, target, beta=1.0, weights=None):
    """Huber-style loss: quadratic inside |d| < beta, linear outside."""
    p = as_tensor(pred)
    t = np.asarray(target, dtype=p.dtype)
    d = p.data - t
    ad_ = np.abs(d)
    elem = np.where(ad_ < beta, 0.5 * d * d / beta, ad_ - 0.5 * beta)
    out_data, wmap = _loss_reduce(elem, weights)

    def backward_fn(g):
        delem = np.clip(d / beta, -1.0, 1.0)
        scale = wmap if wmap is not None else 1.0 / elem.size
        _accumulate(p, g * delem * scale)

    return _make(np.asarray(out_data, dtype=p.dtype), (p,), backward_fn)


# -- modules ---------------------------------------------------------------


class Module:
    """Minimal container tracking parameters, persistent state and children."""

    def __init__(self):
        self._params = {}
        self._state = {}
        self._children = {}
        self.training = True

    def add_param(self, name, value):
        t = value if isinstance(value, Tensor) else Tensor(np.asarray(value, dtype=ad.DEFAULT_DTYPE), requires_grad=True)
        t.requires_grad = True
        t._needs_grad = True
        self._params[name] = t
        return t

    def add_state(self, name, value):
        self._state[name] = np.asarray(value, dtype=ad.DEFAULT_DTYPE)
        return self._state[name]

    def add_child(self, name, module):
        self._children[name] = module
        return module

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(prefix + cname + ".")

    def named_state(self, prefix=""):
        for name, s in self._state.items():
            yield prefix + name, s
        for cname, child in self._children.items():
            yield from child.named_state(prefix + cname + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def set_state(self, name, value):
        head, _, rest = name.partition(".")
        if rest:
            self._children[head].set_state(rest, value)
        else:
            if self._state[name].shape != value.shape:
                raise ShapeError(f"state {name}: shape {value.shape} != {self._state[name].shape}")
            self._state[name][...] = value

    def train(self):
        self.training = True
        for child in self._children.values():
            child.train()
        return self

    def eval(self):
        self.training = False
        for child in self._children.values():
            child.eval()
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def count_params(self):
        return sum(p.data.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _uniform_fan_in(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(ad.DEFAULT_DTYPE)


class Conv2d(Module):
    def __init__(self, cin, cout, kernel, rng, stride=1, padding=None, bias=True):
        super().__init__()
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        fan_in = cin * kernel * kernel
        self.weight = self.add_param("weight", _uniform_fan_in(rng, (cout, cin, kernel, kernel), fan_in))
        self.bias = self.add_param("bias", _uniform_fan_in(rng, (cout,), fan_in)) if bias else None

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels, momentum=0.1, eps=1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = self.add_param("gamma", np.ones(channels))
        self.beta = self.add_param("beta", np.zeros(channels))
        self.running_mean = self.add_state("running_mean", np.zeros(channels))
        self.running_var = self.add_state("running_var", np.ones(channels))

    def forward(self, x):
        if self.training:
            out, mean, var = batch_norm_train(x, self.gamma, self.beta, self.eps)
            self.running_mean += self.momentum * (mean.astype(self.running_mean.dtype) - self.running_mean)
            self.running_var += self.momentum * (var.astype(self.running_var.dtype) - self.running_var)
            return out
        return batch_norm_eval(x, self.gamma, self.beta, self.running_mean, self.running_var, self.eps)


class Linear(Module):
    def __init__(self, fin, fout, rng, zero_init=False):
        super().__init__()
        if zero_init:
            self.weight = self.add_param("weight", np.zeros((fout, fin)))
            self.bias = self.add_param("bias", np.zeros(fout))
        else:
            self.weight = self.add_param("weight", _uniform_fan_in(rng, (fout, fin), fin))
            self.bias = self.add_param("bias", _uniform_fan_in(rng, (fout,), fin))

    def forward(self, x):
        return linear(x, self.weight, self.bias)


class ConvBlock(Module):
    """Conv2d + BatchNorm2d + LeakyReLU, the unit both encoders are built from."""

    def __init__(self, cin, cout, kernel, rng, stride=1):
        super().__init__()
        self.conv = self.add_child("conv", Conv2d(cin, cout, kernel, rng, stride=stride))
        self.bn = self.add_child("bn", BatchNorm2d(cout))

    def forward(self, x):
        return ad.leaky_relu(self.bn(self.conv(x)), LEAKY_SLOPE)


class Sequential(Module):
    def __init__(self, *modules):
        super().__init__()
        self.steps = [self.add_child(str(i), m) for i, m in enumerate(modules)]

    def forward(self, x):
        for m in self.steps:
            x = m(x)
        return x
