"""Differentiable ops. Feature maps are channels-last: [H, W, C]."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .. import kernels
from .core import Tensor, as_tensor, make


def _const(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = _const(b, a)
    sa, sb = a.shape, b.shape

    def bw(g):
        a._accum(_unbroadcast(g, sa))
        b._accum(_unbroadcast(g, sb))

    return make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = _const(b, a)
    sa, sb = a.shape, b.shape

    def bw(g):
        a._accum(_unbroadcast(g, sa))
        b._accum(_unbroadcast(-g, sb))

    return make(a.data - b.data, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    return make(a.data * c, (a,), lambda g: a._accum(g * c))


def _mul_compatible(sa, sb):
    if sa == sb or sb == (1,) or sa == (1,):
        return True
    # channel broadcast: [..., 1] against [..., C]
    return len(sa) == len(sb) and sa[:-1] == sb[:-1] and (sa[-1] == 1 or sb[-1] == 1)


def mul(a, b) -> Tensor:
    """Elementwise product; broadcasting only along the trailing channel axis."""
    a = as_tensor(a)
    b = _const(b, a)
    if not _mul_compatible(a.shape, b.shape):
        raise ValueError(f"mul: shapes {a.shape} and {b.shape} are not channel-broadcastable")
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * bd, sa))
        if b.requires_grad:
            b._accum(_unbroadcast(g * ad, sb))

    return make(ad * bd, (a, b), bw)


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return make(y, (a,), lambda g: a._accum(g * y))


def log(a: Tensor) -> Tensor:
    x = a.data
    return make(np.log(x), (a,), lambda g: a._accum(g / x))


def sin(a: Tensor) -> Tensor:
    x = a.data
    return make(np.sin(x), (a,), lambda g: a._accum(g * np.cos(x)))


def cos(a: Tensor) -> Tensor:
    x = a.data
    return make(np.cos(x), (a,), lambda g: a._accum(-g * np.sin(x)))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    return make(y, (a,), lambda g: a._accum(g * y * (1.0 - y)))


def relu(a: Tensor) -> Tensor:
    m = a.data > 0
    return make(np.where(m, a.data, 0).astype(a.data.dtype), (a,), lambda g: a._accum(g * m))


def square(a: Tensor) -> Tensor:
    x = a.data
    return make(x * x, (a,), lambda g: a._accum(2.0 * g * x))


def smooth_l1(a: Tensor, beta: float = 1.0 / 9.0) -> Tensor:
    x = a.data
    ax = np.abs(x)
    small = ax < beta
    y = np.where(small, 0.5 * x * x / beta, ax - 0.5 * beta)
    dy = np.where(small, x / beta, np.sign(x))
    return make(y.astype(x.dtype), (a,), lambda g: a._accum(g * dy))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        a._accum(y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return make(y, (a,), bw)


def bce_with_logits(x: Tensor, target) -> Tensor:
    """Elementwise binary cross-entropy on logits; soft targets allowed."""
    z = x.data
    t = np.asarray(target, dtype=z.dtype)
    loss = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    p = 0.5 * (1.0 + np.tanh(0.5 * z))
    return make(loss, (x,), lambda g: x._accum(g * (p - t)))


def sigmoid_focal_loss(x: Tensor, target, alpha: float | None = 0.25, gamma: float = 2.0) -> Tensor:
    """Elementwise focal loss on logits. ``alpha=None`` drops the class balance factor."""
    z = x.data
    t = np.asarray(target, dtype=z.dtype)
    p = 0.5 * (1.0 + np.tanh(0.5 * z))
    pt = p * t + (1 - p) * (1 - t)
    ce = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    at = 1.0 if alpha is None else alpha * t + (1 - alpha) * (1 - t)
    mod = (1.0 - pt) ** gamma
    loss = at * mod * ce

    def bw(g):
        dpt = (2 * t - 1) * p * (1 - p)
        dmod = -gamma * (1.0 - pt) ** (gamma - 1) * dpt if gamma > 0 else 0.0
        x._accum(g * at * (dmod * ce + mod * (p - t)))

    return make(loss, (x,), bw)


# ---------------------------------------------------------------- reductions / shape

def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape
    y = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is None:
            a._accum(np.full(shape, g.reshape(-1)[0], dtype=a.data.dtype))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(g, shape).copy())

    return make(y.reshape(y.shape or (1,)), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return make(a.data.reshape(shape), (a,), lambda g: a._accum(g.reshape(old)))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return make(np.transpose(a.data, axes), (a,), lambda g: a._accum(np.transpose(g, inv)))


def concat(ts, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in ts]
    ax = axis % ts[0].ndim
    sizes = [t.shape[ax] for t in ts]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, gp in zip(ts, np.split(g, cuts, axis=ax)):
            t._accum(np.ascontiguousarray(gp))

    return make(np.concatenate([t.data for t in ts], axis=ax), ts, bw)


def _basic_key(key):
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (slice, int, type(None), type(Ellipsis))) for k in parts)


def index(a: Tensor, key) -> Tensor:
    """``a[key]`` for slices or integer arrays."""
    shape = a.shape
    basic = _basic_key(key)

    def bw(g):
        ga = np.zeros(shape, dtype=a.data.dtype)
        if basic:
            ga[key] += g
        else:
            np.add.at(ga, key, g)
        a._accum(ga)

    out = a.data[key]
    return make(np.ascontiguousarray(out), (a,), bw)


def gather_rows(a: Tensor, idx) -> Tensor:
    """Rows of a 2-D tensor: ``a[idx]``."""
    idx = np.asarray(idx, dtype=np.int64)
    n = a.shape[0]

    def bw(g):
        a._accum(kernels.scatter_add(np.ascontiguousarray(g), idx, n))

    return make(a.data[idx], (a,), bw)


def scatter_rows(src: Tensor, idx, n: int) -> Tensor:
    """Sum rows of ``src`` into ``n`` output rows by ``idx``."""
    idx = np.asarray(idx, dtype=np.int64)
    out = kernels.scatter_add(np.ascontiguousarray(src.data), idx, n)
    return make(out, (src,), lambda g: src._accum(g[idx]))


def segment_max(src: Tensor, seg, n: int) -> Tensor:
    """Per-segment channelwise max; empty segments are zero."""
    seg = np.asarray(seg, dtype=np.int64)
    out, arg = kernels.segment_max(np.ascontiguousarray(src.data), seg, n)
    N, C = src.shape

    def bw(g):
        gs = np.zeros((N, C), dtype=src.data.dtype)
        rows, cols = np.nonzero(arg >= 0)
        np.add.at(gs, (arg[rows, cols], cols), g[rows, cols])
        src._accum(gs)

    return make(out, (src,), bw)


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D or batched matmul with identical batch dims."""
    a = as_tensor(a)
    b = _const(b, a)
    ad, bd = a.data, b.data

    def bw(g):
        if a.requires_grad:
            a._accum(g @ np.swapaxes(bd, -1, -2))
        if b.requires_grad:
            b._accum(np.swapaxes(ad, -1, -2) @ g)

    return make(ad @ bd, (a, b), bw)


def attention(q: Tensor, k: Tensor, v: Tensor, scale_by: float) -> tuple:
    """Scaled dot-product attention over batched ``[B, T, d]`` inputs.

    Returns ``(out[B, T, d], weights[B, T, T])``; ``weights`` is a plain array.
    Fused so the ``[B, T, T]`` intermediates are materialised once.
    """
    qd, kd, vd = q.data, k.data, v.data
    A = qd @ np.swapaxes(kd, -1, -2)
    A *= scale_by
    A -= A.max(axis=-1, keepdims=True)
    np.exp(A, out=A)
    A /= A.sum(axis=-1, keepdims=True)

    def bw(g):
        if v.requires_grad:
            v._accum(np.swapaxes(A, -1, -2) @ g)
        dA = g @ np.swapaxes(vd, -1, -2)
        dA -= (dA * A).sum(axis=-1, keepdims=True)
        dA *= A
        dA *= scale_by
        if q.requires_grad:
            q._accum(dA @ kd)
        if k.requires_grad:
            k._accum(np.swapaxes(dA, -1, -2) @ qd)

    return make(A @ vd, (q, k, v), bw), A


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the last axis; x may have any leading shape."""
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    y = x2 @ w.data
    if b is not None:
        y = y + b.data
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        if x.requires_grad:
            x._accum((g2 @ w.data.T).reshape(x.shape))
        if w.requires_grad:
            w._accum(x2.T @ g2)
        if b is not None and b.requires_grad:
            b._accum(g2.sum(axis=0))

    return make(y.reshape(lead + (w.shape[1],)), parents, bw)


def outer(p: Tensor, f: Tensor) -> Tensor:
    """[P, D] x [P, C] -> [P, D, C] per-row outer product."""
    pd, fd = p.data, f.data

    def bw(g):
        if p.requires_grad:
            p._accum(np.einsum("pdc,pc->pd", g, fd))
        if f.requires_grad:
            f._accum(np.einsum("pdc,pd->pc", g, pd))

    return make(pd[:, :, None] * fd[:, None, :], (p, f), bw)


def sparse_matmul(S, x: Tensor) -> Tensor:
    """``S @ x`` for a fixed scipy sparse matrix."""
    ST = S.T.tocsr()
    y = np.asarray(S @ x.data, dtype=x.data.dtype)
    return make(y, (x,), lambda g: x._accum(np.asarray(ST @ g, dtype=x.data.dtype)))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xh = xc * inv
    n = xd.shape[-1]

    def bw(g):
        if gamma.requires_grad:
            gamma._accum((g * xh).reshape(-1, n).sum(axis=0))
        if beta.requires_grad:
            beta._accum(g.reshape(-1, n).sum(axis=0))
        if x.requires_grad:
            gh = g * gamma.data
            x._accum(inv * (gh - gh.mean(axis=-1, keepdims=True)
                            - xh * (gh * xh).mean(axis=-1, keepdims=True)))

    return make(xh * gamma.data + beta.data, (x, gamma, beta), bw)


# ---------------------------------------------------------------- spatial

def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution of ``x[H, W, Cin]`` with ``kernel[k, k, Cin, Cout]``."""
    H, W, Cin = x.shape
    k, k2, kc, Cout = kernel.shape
    if k != k2 or k % 2 == 0:
        raise ValueError("conv2d: kernel must be square with odd size")
    if kc != Cin:
        raise ValueError(f"conv2d: input has {Cin} channels, kernel expects {kc}")
    if stride not in (1, 2):
        raise ValueError("conv2d: stride must be 1 or 2")
    xp = np.pad(x.data, ((padding, padding), (padding, padding), (0, 0))) if padding else x.data
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1
    win = sliding_window_view(xp, (k, k), axis=(0, 1))[::stride, ::stride][:Ho, :Wo]
    # [Ho, Wo, Cin, k, k] -> [Ho*Wo, k*k*Cin] in (ky, kx, c) order to match the kernel
    cols = np.ascontiguousarray(win.transpose(0, 1, 3, 4, 2)).reshape(Ho * Wo, k * k * Cin)
    kmat = kernel.data.reshape(k * k * Cin, Cout)
    y = cols @ kmat
    if bias is not None:
        y += bias.data
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def bw(g):
        g2 = g.reshape(Ho * Wo, Cout)
        if kernel.requires_grad:
            kernel._accum((cols.T @ g2).reshape(kernel.shape))
        if bias is not None and bias.requires_grad:
            bias._accum(g2.sum(axis=0))
        if x.requires_grad:
            # one small matmul per tap keeps each block contiguous
            kk = kernel.data.reshape(k, k, Cin, Cout)
            gxp = np.zeros(xp.shape, dtype=x.data.dtype)
            for dy in range(k):
                for dx in range(k):
                    gxp[dy:dy + stride * Ho:stride, dx:dx + stride * Wo:stride] += \
                        (g2 @ kk[dy, dx].T).reshape(Ho, Wo, Cin)
            if padding:
                gxp = gxp[padding:padding + H, padding:padding + W]
            x._accum(np.ascontiguousarray(gxp))

    return make(y.reshape(Ho, Wo, Cout), parents, bw)


def maxpool2d(x: Tensor, size: int = 2) -> Tensor:
    H, W, C = x.shape
    Ho, Wo = H // size, W // size
    blk = x.data[:Ho * size, :Wo * size].reshape(Ho, size, Wo, size, C).transpose(0, 2, 1, 3, 4)
    flat = blk.reshape(Ho, Wo, size * size, C)
    arg = flat.argmax(axis=2)
    y = np.take_along_axis(flat, arg[:, :, None], axis=2)[:, :, 0]

    def bw(g):
        gf = np.zeros_like(flat)
        np.put_along_axis(gf, arg[:, :, None], g[:, :, None], axis=2)
        gb = gf.reshape(Ho, Wo, size, size, C).transpose(0, 2, 1, 3, 4).reshape(Ho * size, Wo * size, C)
        gx = np.zeros(x.shape, dtype=x.data.dtype)
        gx[:Ho * size, :Wo * size] = gb
        x._accum(gx)

    return make(np.ascontiguousarray(y), (x,), bw)


def _interp_matrix(n_in: int, n_out: int, dtype):
    # half-pixel centres, edge clamped; rows sum to one so constants are preserved
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w1 = src - i0
    R = np.zeros((n_out, n_in), dtype=dtype)
    np.add.at(R, (np.arange(n_out), i0), 1 - w1)
    np.add.at(R, (np.arange(n_out), i1), w1)
    return R


def resize_bilinear(x: Tensor, factor: float) -> Tensor:
    """Bilinear resize by 2 (``factor=2``) or 1/2 (``factor=0.5``)."""
    if factor not in (2, 0.5):
        raise ValueError("resize_bilinear: factor must be 2 or 0.5")
    H, W, C = x.shape
    Ho, Wo = int(round(H * factor)), int(round(W * factor))
    Ry = _interp_matrix(H, Ho, x.data.dtype)
    Rx = _interp_matrix(W, Wo, x.data.dtype)
    y = np.einsum("ah,bw,hwc->abc", Ry, Rx, x.data, optimize=True)

    def bw(g):
        x._accum(np.einsum("ah,bw,abc->hwc", Ry, Rx, g, optimize=True))

    return make(y, (x,), bw)


def bilinear_sample(fmap: Tensor, coords) -> Tensor:
    """Sample ``fmap[H, W, C]`` at continuous ``(u, v)`` = (column, row) positions.

    Neighbours outside the map contribute zero, so fully out-of-bounds
    coordinates return zero. Differentiable in both the map and the coordinates.
    """
    coords = as_tensor(coords)
    c = np.ascontiguousarray(coords.data.reshape(-1, 2))
    lead = coords.shape[:-1]
    fm = np.ascontiguousarray(fmap.data)
    out = kernels.bilinear_gather(fm, c.astype(fm.dtype, copy=False))
    C = fmap.shape[2]

    def bw(g):
        gmap, gc = kernels.bilinear_gather_grad(fm, c.astype(fm.dtype, copy=False),
                                                np.ascontiguousarray(g.reshape(-1, C)))
        fmap._accum(gmap)
        if coords.requires_grad:
            coords._accum(gc.reshape(coords.shape).astype(coords.data.dtype))

    return make(out.reshape(lead + (C,)), (fmap, coords), bw)
