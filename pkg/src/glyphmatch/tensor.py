"""Dense tensors with tape-based reverse-mode automatic differentiation.

Every differentiable op records its parents and a closure mapping the output
gradient to parent gradients. ``Tensor.backward`` topologically sorts the
recorded graph, propagates gradients and frees the graph.

Arrays are float32 by default. Float64 inputs stay float64, which is what the
gradient-check harness relies on.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


def _as_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, Tensor):
        return data.data
    if isinstance(data, np.generic):  # full reductions return numpy scalars
        data = np.asarray(data)
    if isinstance(data, np.ndarray):
        if data.dtype in (np.float32, np.float64) and dtype is None:
            return data
        return data.astype(dtype or DEFAULT_DTYPE)
    return np.asarray(data, dtype=dtype or DEFAULT_DTYPE)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = _as_array(data)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("item() requires a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- autodiff -----------------------------------------------------------
    def backward(self, grad: Optional[np.ndarray] = None, retain_graph: bool = False) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            if not retain_graph:
                node._parents = ()
                node._backward = None

    # -- operator sugar -----------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def _topological_order(root: Tensor) -> list:
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap an op result, recording the graph edge only when needed."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def custom_op(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Public hook for ops defined outside this module (e.g. the CTC loss)."""
    return _make(data, parents, backward)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _coerce_pair(a, b):
    # python numbers take the other operand's precision
    if isinstance(b, Tensor) and isinstance(a, (int, float)):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    if isinstance(a, Tensor) and isinstance(b, (int, float)):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    a = as_tensor(a)
    b = as_tensor(b)
    if a.dtype != b.dtype:
        if a.data.ndim == 0 and not a.requires_grad:
            a = Tensor(a.data.astype(b.dtype))
        elif b.data.ndim == 0 and not b.requires_grad:
            b = Tensor(b.data.astype(a.dtype))
    return a, b


# -- elementwise -------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    ad, bd = a.data, b.data

    def backward(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _make(ad * bd, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return _make(out, (a, b), backward)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


# -- reductions and shape ----------------------------------------------------
def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), backward)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / float(n))


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def getitem(x: Tensor, idx) -> Tensor:
    shape, dtype = x.shape, x.dtype
    fancy = any(isinstance(i, (list, np.ndarray)) for i in (idx if isinstance(idx, tuple) else (idx,)))

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        if fancy:
            np.add.at(full, idx, g)
        else:
            full[idx] += g
        return (full,)

    return _make(x.data[idx], (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def pad_right(x: Tensor, amount: int, axis: int = -1) -> Tensor:
    """Zero-pad ``amount`` entries at the end of ``axis``."""
    if amount == 0:
        return x
    widths = [(0, 0)] * x.ndim
    widths[axis] = (0, amount)
    n = x.shape[axis]
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(0, n)
    sl = tuple(sl)
    return _make(np.pad(x.data, widths), (x,), lambda g: (g[sl],))


# -- linear algebra ----------------------------------------------------------
def matmul(a, b) -> Tensor:
    """Matrix product with numpy broadcasting over leading batch axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ValueError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make(ad @ bd, (a, b), backward)


# -- normalisations ----------------------------------------------------------
def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return _make(out, (x,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    return _make(out, (x,), lambda g: (g - np.exp(out) * g.sum(axis=axis, keepdims=True),))


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)
    w = e / s
    return _make(out, (x,), lambda g: (np.expand_dims(g, axis) * w,))


def _axis_shape(ndim: int, axis: int, n: int) -> tuple:
    shape = [1] * ndim
    shape[axis] = n
    return tuple(shape)


def layernorm(x: Tensor, axis: int, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize to zero mean / unit variance along ``axis``, then scale and shift."""
    axis = axis % x.ndim
    n = x.shape[axis]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ValueError(f"layernorm gain/bias must have shape ({n},), got {gain.shape}/{bias.shape}")
    bshape = _axis_shape(x.ndim, axis, n)
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data.reshape(bshape)
    out = xhat * gd + bias.data.reshape(bshape)
    other = tuple(i for i in range(x.ndim) if i != axis)

    def backward(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gd
            gx = inv * (
                dxhat
                - dxhat.mean(axis=axis, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=axis, keepdims=True)
            )
        ggain = (g * xhat).sum(axis=other) if gain.requires_grad else None
        gbias = g.sum(axis=other) if bias.requires_grad else None
        return gx, ggain, gbias

    return _make(out.astype(x.dtype, copy=False), (x, gain, bias), backward)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """x / ||x|| along ``axis``; all-zero vectors map to zero."""
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    safe = np.maximum(norm, eps)
    out = x.data / safe
    big = norm > eps

    def backward(g):
        proj = (g * out).sum(axis=axis, keepdims=True)
        # not differentiable at 0; take the zero subgradient there
        return (np.where(big, (g - out * proj) / safe, 0.0).astype(out.dtype, copy=False),)

    return _make(out, (x,), backward)


# -- convolution and pooling -------------------------------------------------
def _pair(v) -> tuple:
    return (v, v) if isinstance(v, int) else tuple(v)


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, stride=1, padding=0) -> Tensor:
    """2-D cross-correlation, NCHW input and OIKhKw kernel, via im2col."""
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if x.ndim != 4:
        raise ValueError(f"conv2d input must be NCHW, got {x.ndim} axes")
    if kernel.ndim != 4:
        raise ValueError(f"conv2d kernel must be OIKhKw, got {kernel.ndim} axes")
    n, c, h, w = x.shape
    o, i, kh, kw = kernel.shape
    if c != i:
        raise ValueError(f"conv2d channel axis mismatch: input has {c}, kernel expects {i}")
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d spatial axis too small: input {h}x{w}, kernel {kh}x{kw}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, : sh * (ho - 1) + 1 : sh, : sw * (wo - 1) + 1 : sw]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    wmat = kernel.data.reshape(o, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gk = (gm.T @ cols).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (gm @ wmat).reshape(n, ho, wo, c, kh, kw)
            dxp = np.zeros(xp.shape, dtype=x.dtype)
            for a in range(kh):
                for b in range(kw):
                    dxp[:, :, a : a + sh * ho : sh, b : b + sw * wo : sw] += dcols[:, :, :, :, a, b].transpose(0, 3, 1, 2)
            gx = dxp[:, :, ph : ph + h, pw : pw + w]
        if bias is None:
            return gx, gk
        return gx, gk, (gm.sum(axis=0) if bias.requires_grad else None)

    return _make(out, parents, backward)


def _check_pool(x: Tensor, window: tuple, stride: tuple, what: str) -> None:
    if tuple(window) != tuple(stride):
        raise ValueError(f"{what} supports non-overlapping windows only (window == stride)")
    _, _, h, w = x.shape
    if h % window[0]:
        raise ValueError(f"{what}: height {h} not divisible by window {window[0]}")
    if w % window[1]:
        raise ValueError(f"{what}: width {w} not divisible by window {window[1]}")


def maxpool2d(x: Tensor, window, stride=None) -> Tensor:
    """Non-overlapping max pooling; ties send the gradient to the first cell."""
    window = _pair(window)
    stride = _pair(stride) if stride is not None else window
    _check_pool(x, window, stride, "maxpool2d")
    n, c, h, w = x.shape
    kh, kw = window
    blocks = x.data.reshape(n, c, h // kh, kh, w // kw, kw).transpose(0, 1, 2, 4, 3, 5)
    flat = blocks.reshape(n, c, h // kh, w // kw, kh * kw)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gflat = np.zeros(flat.shape, dtype=x.dtype)
        np.put_along_axis(gflat, arg[..., None], g[..., None], axis=-1)
        gx = gflat.reshape(n, c, h // kh, w // kw, kh, kw).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return _make(out, (x,), backward)


def avgpool2d(x: Tensor, window, stride=None) -> Tensor:
    window = _pair(window)
    stride = _pair(stride) if stride is not None else window
    _check_pool(x, window, stride, "avgpool2d")
    n, c, h, w = x.shape
    kh, kw = window
    out = x.data.reshape(n, c, h // kh, kh, w // kw, kw).mean(axis=(3, 5))
    scale = 1.0 / (kh * kw)

    def backward(g):
        gx = np.repeat(np.repeat(g * scale, kh, axis=2), kw, axis=3)
        return (gx.astype(x.dtype, copy=False),)

    return _make(out, (x,), backward)


def _upsample_matrix(n: int, dtype) -> np.ndarray:
    """(2n x n) linear map for 2x bilinear resampling, align-corners false."""
    m = np.zeros((2 * n, n), dtype=dtype)
    for o in range(2 * n):
        src = max((o + 0.5) / 2.0 - 0.5, 0.0)
        lo = min(int(np.floor(src)), n - 1)
        hi = min(lo + 1, n - 1)
        frac = src - lo
        m[o, lo] += 1.0 - frac
        m[o, hi] += frac
    return m


def upsample_bilinear2(x: Tensor) -> Tensor:
    """Double both spatial extents with bilinear interpolation."""
    _, _, h, w = x.shape
    uh = _upsample_matrix(h, x.dtype)
    uw = _upsample_matrix(w, x.dtype)
    out = np.matmul(np.matmul(uh, x.data), uw.T)
    return _make(out, (x,), lambda g: (np.matmul(np.matmul(uh.T, g), uw),))


# -- channels-last kernels used by the encoder --------------------------------
def conv2d_nhwc(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, padding: int = 0) -> Tensor:
    """Stride-1 convolution on NHWC input with an OIKhKw kernel.

    Each kernel tap is one GEMM over a contiguous slice of the flattened,
    padded input, so no im2col buffer is materialised.
    """
    n, h, w, c = x.shape
    o, i, kh, kw = kernel.shape
    if c != i:
        raise ValueError(f"conv2d channel axis mismatch: input has {c}, kernel expects {i}")
    if kh == 1 and kw == 1 and padding == 0:
        wmat = kernel.data.reshape(o, c)
        flat = x.data.reshape(-1, c)
        out = flat @ wmat.T
        if bias is not None:
            out += bias.data

        def backward1(g):
            gm = g.reshape(-1, o)
            gx = (gm @ wmat).reshape(x.shape) if x.requires_grad else None
            gk = (gm.T @ flat).reshape(kernel.shape) if kernel.requires_grad else None
            if bias is None:
                return gx, gk
            return gx, gk, gm.sum(axis=0)

        parents = (x, kernel) if bias is None else (x, kernel, bias)
        return _make(out.reshape(n, h, w, o), parents, backward1)

    p = padding
    hp, wp = h + 2 * p, w + 2 * p
    ho, wo = hp - kh + 1, wp - kw + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d spatial axis too small: input {h}x{w}, kernel {kh}x{kw}")
    rows = n * hp * wp
    tail = (kh - 1) * wp + (kw - 1)
    xflat = np.zeros((rows + tail, c), dtype=x.dtype)
    xflat[:rows].reshape(n, hp, wp, c)[:, p : p + h, p : p + w] = x.data
    taps = np.ascontiguousarray(kernel.data.transpose(2, 3, 1, 0))  # kh, kw, C, O
    full = np.zeros((rows, o), dtype=x.dtype)
    for a in range(kh):
        for b in range(kw):
            s = a * wp + b
            full += xflat[s : s + rows] @ taps[a, b]
    out = full.reshape(n, hp, wp, o)[:, :ho, :wo]
    if bias is not None:
        out = out + bias.data
    out = np.ascontiguousarray(out)
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g):
        gfull = np.zeros((n, hp, wp, o), dtype=x.dtype)
        gfull[:, :ho, :wo] = g
        gfull = gfull.reshape(rows, o)
        gk = None
        if kernel.requires_grad:
            gtaps = np.empty((kh, kw, c, o), dtype=x.dtype)
            for a in range(kh):
                for b in range(kw):
                    s = a * wp + b
                    gtaps[a, b] = xflat[s : s + rows].T @ gfull
            gk = gtaps.transpose(3, 2, 0, 1)
        gx = None
        if x.requires_grad:
            dflat = np.zeros((rows + tail, c), dtype=x.dtype)
            for a in range(kh):
                for b in range(kw):
                    s = a * wp + b
                    dflat[s : s + rows] += gfull @ taps[a, b].T
            gx = dflat[:rows].reshape(n, hp, wp, c)[:, p : p + h, p : p + w]
        if bias is None:
            return gx, gk
        return gx, gk, g.reshape(-1, o).sum(axis=0)

    return _make(out, parents, backward)


def maxpool2d_nhwc(x: Tensor, window) -> Tensor:
    """Non-overlapping max pooling over the H, W axes of an NHWC tensor."""
    kh, kw = _pair(window)
    n, h, w, c = x.shape
    if h % kh:
        raise ValueError(f"maxpool2d: height {h} not divisible by window {kh}")
    if w % kw:
        raise ValueError(f"maxpool2d: width {w} not divisible by window {kw}")
    cands = [x.data[:, a::kh, b::kw] for a in range(kh) for b in range(kw)]
    out = cands[0]
    for cand in cands[1:]:
        out = np.maximum(out, cand)

    def backward(g):
        gx = np.zeros(x.shape, dtype=x.dtype)
        taken = np.zeros(out.shape, dtype=bool)
        k = 0
        for a in range(kh):
            for b in range(kw):
                sel = (cands[k] == out) & ~taken
                gx[:, a::kh, b::kw] = g * sel
                taken |= sel
                k += 1
        return (gx,)

    return _make(np.ascontiguousarray(out), (x,), backward)


def avgpool2d_nhwc(x: Tensor, window) -> Tensor:
    kh, kw = _pair(window)
    n, h, w, c = x.shape
    if h % kh or w % kw:
        raise ValueError(f"avgpool2d: extents {h}x{w} not divisible by window {kh}x{kw}")
    out = x.data.reshape(n, h // kh, kh, w // kw, kw, c).mean(axis=(2, 4))
    scale = 1.0 / (kh * kw)

    def backward(g):
        return (np.repeat(np.repeat(g * scale, kh, axis=1), kw, axis=2).astype(x.dtype, copy=False),)

    return _make(out.astype(x.dtype, copy=False), (x,), backward)


def upsample_bilinear2_nhwc(x: Tensor) -> Tensor:
    n, h, w, c = x.shape
    uh = _upsample_matrix(h, x.dtype)
    uw = _upsample_matrix(w, x.dtype)
    # rows: (2h x h) applied on axis 1, cols: (2w x w) applied on axis 2
    t = np.einsum("ph,nhwc->npwc", uh, x.data, optimize=True)
    out = np.einsum("qw,npwc->npqc", uw, t, optimize=True)

    def backward(g):
        t2 = np.einsum("qw,npqc->npwc", uw, g, optimize=True)
        return (np.einsum("ph,npwc->nhwc", uh, t2, optimize=True),)

    return _make(np.ascontiguousarray(out), (x,), backward)


def resize_width_bilinear(img: np.ndarray, new_w: int) -> np.ndarray:
    """Bilinear resample of the last axis to ``new_w`` (align-corners false).

    Plain array helper for image preparation; not differentiable.
    """
    w = img.shape[-1]
    src = np.clip((np.arange(new_w) + 0.5) * (w / new_w) - 0.5, 0, w - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, w - 1)
    frac = (src - lo).astype(img.dtype)
    return img[..., lo] * (1 - frac) + img[..., hi] * frac


def parameters_of(tensors: Iterable[Tensor]) -> list:
    return [t for t in tensors if t.requires_grad]
