"""Dense float64 tensors with reverse-mode automatic differentiation.

The computation graph doubles as the gradient tape: every op records its
parents and a local backward rule as a closure, and ``Tensor.backward``
replays the closures in reverse topological order. Everything is float64
so finite-difference and dense-Hessian cross-checks are meaningful.
"""

from __future__ import annotations

import struct

import numpy as np
from numpy.lib.stride_tricks import as_strided

PROB_CLAMP = 1e-12  # floor applied to probabilities before any log
_BN_EPS = 1e-5


class ShapeError(ValueError):
    """Raised when operand shapes do not conform; names the op and shapes."""

    def __init__(self, op, *shapes):
        super().__init__(f"{op}: incompatible shapes {' vs '.join(str(s) for s in shapes)}")


class ConfigError(ValueError):
    """Raised for invalid hyperparameters or malformed configuration."""


_grad_enabled = True


class no_grad:
    """Context that skips tape recording; use around pure inference."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = _grad_enabled and (
            requires_grad or any(p.requires_grad for p in _parents)
        )
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data.item())

    def zero_grad(self):
        self.grad = None

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        """Populate grads of every requires_grad ancestor of this scalar."""
        if self.data.size != 1:
            raise ShapeError("backward", self.shape)
        topo = []
        seen = set()
        stack = [(self, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))
        self._accum(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # operator sugar; scalars are promoted to constant tensors
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(_wrap(other), -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad, shape):
    """Reduce a broadcast gradient back to ``shape``."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a, b):
    try:
        out_data = a.data + b.data
    except ValueError:
        raise ShapeError("add", a.shape, b.shape) from None

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))

    return Tensor(out_data, _parents=(a, b), _backward=backward)


def mul(a, b):
    try:
        out_data = a.data * b.data
    except ValueError:
        raise ShapeError("mul", a.shape, b.shape) from None

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return Tensor(out_data, _parents=(a, b), _backward=backward)


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accum(g @ b.data.T)
        if b.requires_grad:
            b._accum(a.data.T @ g)

    return Tensor(out_data, _parents=(a, b), _backward=backward)


def relu(t):
    mask = t.data > 0

    def backward(g):
        t._accum(g * mask)

    return Tensor(np.where(mask, t.data, 0.0), _parents=(t,), _backward=backward)


def tanh(t):
    out_data = np.tanh(t.data)

    def backward(g):
        t._accum(g * (1.0 - out_data * out_data))

    return Tensor(out_data, _parents=(t,), _backward=backward)


def scale(t, c):
    c = float(c)

    def backward(g):
        t._accum(g * c)

    return Tensor(t.data * c, _parents=(t,), _backward=backward)


def clamp_max(t, c):
    c = float(c)
    mask = t.data < c

    def backward(g):
        t._accum(g * mask)

    return Tensor(np.minimum(t.data, c), _parents=(t,), _backward=backward)


def log(t):
    """Elementwise natural log with the probability floor."""
    clamped = np.maximum(t.data, PROB_CLAMP)
    active = t.data > PROB_CLAMP

    def backward(g):
        t._accum(g * active / clamped)

    return Tensor(np.log(clamped), _parents=(t,), _backward=backward)


def reshape(t, shape):
    old = t.shape

    def backward(g):
        t._accum(g.reshape(old))

    return Tensor(t.data.reshape(shape), _parents=(t,), _backward=backward)


def tsum(t):
    def backward(g):
        t._accum(np.full_like(t.data, float(g)))

    return Tensor(t.data.sum(), _parents=(t,), _backward=backward)


def tmean(t):
    n = t.data.size

    def backward(g):
        t._accum(np.full_like(t.data, float(g) / n))

    return Tensor(t.data.mean(), _parents=(t,), _backward=backward)


def softmax(t):
    """Softmax along the last axis."""
    z = t.data - t.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=-1, keepdims=True)
        t._accum(out_data * (g - dot))

    return Tensor(out_data, _parents=(t,), _backward=backward)


def nll_loss(probs, labels):
    """Mean negative log probability of the true class.

    ``probs`` holds per-example categorical probabilities (n, classes);
    probabilities are floored at PROB_CLAMP before the log.
    """
    labels = np.asarray(labels)
    if probs.ndim != 2 or labels.ndim != 1 or probs.shape[0] != labels.shape[0]:
        raise ShapeError("nll_loss", probs.shape, labels.shape)
    n, c = probs.shape
    if labels.min() < 0 or labels.max() >= c:
        raise ConfigError(f"nll_loss: label out of range [0, {c})")
    rows = np.arange(n)
    p = probs.data[rows, labels]
    clamped = np.maximum(p, PROB_CLAMP)

    def backward(g):
        dp = np.zeros_like(probs.data)
        dp[rows, labels] = -float(g) / n / clamped * (p > PROB_CLAMP)
        probs._accum(dp)

    return Tensor(-np.log(clamped).mean(), _parents=(probs,), _backward=backward)


# ---------------------------------------------------------------------------
# spatial ops
# ---------------------------------------------------------------------------


def pad2d(t, pads, mode="zero"):
    """Pad the two trailing axes by (top, bottom, left, right)."""
    top, bottom, left, right = pads
    if min(pads) < 0:
        raise ConfigError(f"pad2d: negative pad {pads}")
    if mode == "zero":
        np_mode = "constant"
    elif mode == "replicate":
        np_mode = "edge"
    else:
        raise ConfigError(f"pad2d: unknown mode {mode!r}")
    width = [(0, 0)] * (t.ndim - 2) + [(top, bottom), (left, right)]
    out_data = np.pad(t.data, width, mode=np_mode)
    h, w = t.shape[-2], t.shape[-1]

    def backward(g):
        core = g[..., top:top + h, left:left + w].copy()
        if mode == "replicate":
            # fold padded-strip gradients back onto the copied edge cells
            if top:
                core[..., 0, :] += g[..., :top, left:left + w].sum(axis=-2)
            if bottom:
                core[..., -1, :] += g[..., top + h:, left:left + w].sum(axis=-2)
            if left:
                core[..., :, 0] += g[..., top:top + h, :left].sum(axis=-1)
            if right:
                core[..., :, -1] += g[..., top:top + h, left + w:].sum(axis=-1)
            if top and left:
                core[..., 0, 0] += g[..., :top, :left].sum(axis=(-2, -1))
            if top and right:
                core[..., 0, -1] += g[..., :top, left + w:].sum(axis=(-2, -1))
            if bottom and left:
                core[..., -1, 0] += g[..., top + h:, :left].sum(axis=(-2, -1))
            if bottom and right:
                core[..., -1, -1] += g[..., top + h:, left + w:].sum(axis=(-2, -1))
        t._accum(core)

    return Tensor(out_data, _parents=(t,), _backward=backward)


def _im2col(x, kh, kw, stride):
    n, c, h, w = x.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    s0, s1, s2, s3 = x.strides
    windows = as_strided(
        x, (n, c, kh, kw, oh, ow), (s0, s1, s2, s3, s2 * stride, s3 * stride)
    )
    return windows.reshape(n, c * kh * kw, oh * ow), oh, ow


def _col2im(cols, x_shape, kh, kw, stride, oh, ow):
    n, c, h, w = x_shape
    dx = np.zeros(x_shape)
    cols = cols.reshape(n, c, kh, kw, oh, ow)
    for a in range(kh):
        for b in range(kw):
            dx[:, :, a:a + oh * stride:stride, b:b + ow * stride:stride] += cols[:, :, a, b]
    return dx


def conv2d(x, kernel, stride=1, padding=0):
    """Cross-correlation of (n, ci, h, w) input with (co, ci, kh, kw) kernel."""
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[1] != kernel.shape[1]:
        raise ShapeError("conv2d", x.shape, kernel.shape)
    if stride < 1:
        raise ConfigError(f"conv2d: stride must be >= 1, got {stride}")
    co, ci, kh, kw = kernel.shape
    xp = pad2d(x, (padding,) * 4, mode="zero") if padding else x
    n, _, h, w = xp.shape
    if h < kh or w < kw:
        raise ShapeError("conv2d", xp.shape, kernel.shape)
    cols, oh, ow = _im2col(xp.data, kh, kw, stride)
    w2 = kernel.data.reshape(co, ci * kh * kw)
    out_data = np.matmul(w2, cols).reshape(n, co, oh, ow)

    def backward(g):
        gf = g.reshape(n, co, oh * ow)
        if kernel.requires_grad:
            kernel._accum(np.einsum("ncl,nkl->ck", gf, cols).reshape(kernel.shape))
        if xp.requires_grad:
            dcols = np.matmul(w2.T, gf)
            xp._accum(_col2im(dcols, xp.shape, kh, kw, stride, oh, ow))

    return Tensor(out_data, _parents=(xp, kernel), _backward=backward)


def depthwise_conv2d(x, kernel2d):
    """Valid cross-correlation of every channel with one shared 2-D kernel."""
    if x.ndim != 4 or kernel2d.ndim != 2:
        raise ShapeError("depthwise_conv2d", x.shape, kernel2d.shape)
    k = np.asarray(kernel2d, dtype=np.float64)
    kh, kw = k.shape
    n, c, h, w = x.shape
    if h < kh or w < kw:
        raise ShapeError("depthwise_conv2d", x.shape, k.shape)
    oh, ow = h - kh + 1, w - kw + 1
    out_data = np.zeros((n, c, oh, ow))
    for a in range(kh):
        for b in range(kw):
            out_data += k[a, b] * x.data[:, :, a:a + oh, b:b + ow]

    def backward(g):
        dx = np.zeros_like(x.data)
        for a in range(kh):
            for b in range(kw):
                dx[:, :, a:a + oh, b:b + ow] += k[a, b] * g
        x._accum(dx)

    return Tensor(out_data, _parents=(x,), _backward=backward)


def _pool_setup(op, x, k, stride):
    if x.ndim != 4:
        raise ShapeError(op, x.shape)
    stride = k if stride is None else stride
    if k < 1 or stride < 1:
        raise ConfigError(f"{op}: kernel and stride must be >= 1")
    n, c, h, w = x.shape
    if h < k or w < k:
        raise ShapeError(op, x.shape, (k, k))
    return stride


def _pool_windows(data, k, stride):
    n, c, h, w = data.shape
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1
    s0, s1, s2, s3 = data.strides
    win = as_strided(data, (n, c, oh, ow, k, k), (s0, s1, s2 * stride, s3 * stride, s2, s3))
    return win, oh, ow


def avg_pool2d(x, k, stride=None, padding=0):
    stride = _pool_setup("avg_pool2d", x, k, stride)
    xp = pad2d(x, (padding,) * 4, mode="zero") if padding else x
    win, oh, ow = _pool_windows(xp.data, k, stride)
    out_data = win.mean(axis=(4, 5))
    n, c = xp.shape[:2]

    def backward(g):
        dx = np.zeros_like(xp.data)
        gk = g / (k * k)
        for a in range(k):
            for b in range(k):
                dx[:, :, a:a + oh * stride:stride, b:b + ow * stride:stride] += gk
        xp._accum(dx)

    return Tensor(out_data, _parents=(xp,), _backward=backward)


def _select_pool(x, k, stride, flat_index_fn, op):
    """Pool that forwards one selected element per window (max / median)."""
    stride = _pool_setup(op, x, k, stride)
    win, oh, ow = _pool_windows(x.data, k, stride)
    n, c = x.shape[:2]
    flat = win.reshape(n, c, oh, ow, k * k)
    sel = flat_index_fn(flat)  # (n, c, oh, ow) index into the k*k window
    out_data = np.take_along_axis(flat, sel[..., None], axis=-1)[..., 0]

    def backward(g):
        dx = np.zeros_like(x.data)
        oy, ox = np.meshgrid(np.arange(oh), np.arange(ow), indexing="ij")
        rows = oy * stride + sel // k
        cols = ox * stride + sel % k
        ni = np.arange(n)[:, None, None, None]
        ci_ = np.arange(c)[None, :, None, None]
        np.add.at(dx, (ni, ci_, rows, cols), g)
        x._accum(dx)

    return Tensor(out_data, _parents=(x,), _backward=backward)


def max_pool2d(x, k, stride=None):
    return _select_pool(x, k, stride, lambda flat: flat.argmax(axis=-1), "max_pool2d")


def median_pool2d(x, k, stride=None):
    """Median pooling; an even window routes to the lower median element."""

    def lower_median(flat):
        m = flat.shape[-1]
        order = np.argsort(flat, axis=-1, kind="stable")
        return order[..., (m - 1) // 2]

    return _select_pool(x, k, stride, lower_median, "median_pool2d")


def spatial_mean(x):
    """(n, c, h, w) -> (n, c) mean over the spatial axes."""
    if x.ndim != 4:
        raise ShapeError("spatial_mean", x.shape)
    n, c, h, w = x.shape

    def backward(g):
        x._accum(np.broadcast_to(g[:, :, None, None] / (h * w), x.shape))

    return Tensor(x.data.mean(axis=(2, 3)), _parents=(x,), _backward=backward)


def _spatial_select(x, flat_index_fn, op):
    if x.ndim != 4:
        raise ShapeError(op, x.shape)
    n, c, h, w = x.shape
    flat = x.data.reshape(n, c, h * w)
    sel = flat_index_fn(flat)
    out_data = np.take_along_axis(flat, sel[..., None], axis=-1)[..., 0]

    def backward(g):
        dx = np.zeros((n, c, h * w))
        np.put_along_axis(dx, sel[..., None], g[..., None], axis=-1)
        x._accum(dx.reshape(x.shape))

    return Tensor(out_data, _parents=(x,), _backward=backward)


def spatial_max(x):
    return _spatial_select(x, lambda flat: flat.argmax(axis=-1), "spatial_max")


def spatial_median(x):
    """(n, c, h, w) -> (n, c) lower median over the spatial axes."""

    def lower_median(flat):
        m = flat.shape[-1]
        order = np.argsort(flat, axis=-1, kind="stable")
        return order[..., (m - 1) // 2]

    return _spatial_select(x, lower_median, "spatial_median")


def batch_norm(x, gamma, beta, running_mean, running_var, training, momentum=0.1):
    """Per-channel batch normalization over (n, c, h, w).

    In training mode the batch statistics normalize and the running buffers
    are updated in place; otherwise the running statistics are used.
    """
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError("batch_norm", x.shape, gamma.shape, beta.shape)
    c = x.shape[1]
    ga = gamma.data.reshape(1, c, 1, 1)
    be = beta.data.reshape(1, c, 1, 1)
    if training:
        mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
        var = x.data.var(axis=(0, 2, 3), keepdims=True)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(c)
        running_var *= 1.0 - momentum
        running_var += momentum * var.reshape(c)
    else:
        mu = running_mean.reshape(1, c, 1, 1)
        var = running_var.reshape(1, c, 1, 1)
    inv = 1.0 / np.sqrt(var + _BN_EPS)
    xhat = (x.data - mu) * inv
    out_data = ga * xhat + be
    m = x.data.size // c

    def backward(g):
        if gamma.requires_grad:
            gamma._accum((g * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            beta._accum(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            if training:
                gm = g.mean(axis=(0, 2, 3), keepdims=True)
                gxm = (g * xhat).mean(axis=(0, 2, 3), keepdims=True)
                x._accum(ga * inv * (g - gm - xhat * gxm))
            else:
                x._accum(ga * inv * g)

    return Tensor(out_data, _parents=(x, gamma, beta), _backward=backward)


def dropout(x, rate, train_mode, rng=None):
    """Zero each element with probability ``rate``; survivors scale 1/(1-rate).

    ``train_mode`` keeps the op stochastic (also used for MC sampling at
    inference); when it is off the input passes through unchanged.
    """
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout: rate must be in [0, 1), got {rate}")
    if not train_mode or rate == 0.0:
        return x
    if rng is None:
        raise ConfigError("dropout: stochastic mode requires an rng")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)

    def backward(g):
        x._accum(g * mask)

    return Tensor(x.data * mask, _parents=(x,), _backward=backward)


# ---------------------------------------------------------------------------
# gradients of closures, Hessian-vector products
# ---------------------------------------------------------------------------


def gradient(loss_fn, weights):
    """Evaluate loss_fn() and return a fresh gradient per weight tensor."""
    for w in weights:
        w.grad = None
    loss = loss_fn()
    loss.backward()
    grads = []
    for w in weights:
        grads.append(np.zeros_like(w.data) if w.grad is None else w.grad.copy())
        w.grad = None
    return grads


def hvp(loss_fn, weights, v):
    """Hessian-vector product of loss_fn at the current weights.

    Uses central finite differences of the autodiff gradient along v with
    step h = sqrt(machine eps) * (1 + max|w|); the tape here is first-order
    only, so a second differentiation pass is not available.
    """
    if len(v) != len(weights) or any(vi.shape != w.shape for vi, w in zip(v, weights)):
        raise ShapeError("hvp", [w.shape for w in weights], [vi.shape for vi in v])
    norm = np.sqrt(sum(float((vi * vi).sum()) for vi in v))
    if norm == 0.0:
        return [np.zeros_like(w.data) for w in weights]
    unit = [vi / norm for vi in v]
    wmax = max(float(np.abs(w.data).max()) if w.data.size else 0.0 for w in weights)
    h = np.sqrt(np.finfo(np.float64).eps) * (1.0 + wmax)
    saved = [w.data.copy() for w in weights]
    try:
        for w, u in zip(weights, unit):
            w.data = w.data + h * u
        g_plus = gradient(loss_fn, weights)
        for w, s, u in zip(weights, saved, unit):
            w.data = s - h * u
        g_minus = gradient(loss_fn, weights)
    finally:
        for w, s in zip(weights, saved):
            w.data = s
    return [(gp - gm) * (norm / (2.0 * h)) for gp, gm in zip(g_plus, g_minus)]


# ---------------------------------------------------------------------------
# serialization: shape header (count, then dims) + little-endian f8 payload
# ---------------------------------------------------------------------------


def array_to_bytes(a):
    a = np.asarray(a, dtype=np.float64)
    header = struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return header + a.astype("<f8").tobytes()


def array_from_bytes(buf, offset=0):
    """Decode one array; returns (array, next_offset)."""
    (ndim,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    shape = struct.unpack_from(f"<{ndim}I", buf, offset)
    offset += 4 * ndim
    count = int(np.prod(shape)) if ndim else 1
    data = np.frombuffer(buf, dtype="<f8", count=count, offset=offset)
    offset += 8 * count
    return data.reshape(shape).astype(np.float64), offset
