"""Pure-numpy reference kernels.

Every routine here has a twin in ``_ckernels.pyx``. The two must agree
bit-for-bit, so accumulation order is fixed: im2col/col2im walk kernel
offsets row-major, the bilinear passes use the ``a + 0.25 * (b - a)`` form and
sum backward contributions as ``((A + B) + C) + D``.
"""

import numpy as np


def out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def im2col(x, kh, kw, stride, pad):
    """Unfold ``x[N,C,H,W]`` into columns ``[C*kh*kw, N*Ho*Wo]``."""
    n, c, h, w = x.shape
    ho, wo = out_size(h, kh, stride, pad), out_size(w, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            win = x[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
            cols[:, i, j] = win.transpose(1, 0, 2, 3)
    return cols.reshape(c * kh * kw, n * ho * wo)


def col2im(cols, shape, kh, kw, stride, pad):
    """Adjoint of :func:`im2col`: scatter-add columns back to ``shape``."""
    n, c, h, w = shape
    ho, wo = out_size(h, kh, stride, pad), out_size(w, kw, stride, pad)
    cols = cols.reshape(c, kh, kw, n, ho, wo)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                cols[:, i, j].transpose(1, 0, 2, 3)
    if pad:
        xp = np.ascontiguousarray(xp[:, :, pad:pad + h, pad:pad + w])
    return xp


def maxpool2x2_forward(x):
    """Returns pooled values and the in-window argmax (0..3, first max wins)."""
    n, c, h, w = x.shape
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1).astype(np.int8)
    out = np.take_along_axis(win, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx


def maxpool2x2_backward(grad, idx):
    n, c, h2, w2 = grad.shape
    win = np.zeros((n, c, h2, w2, 4), dtype=grad.dtype)
    np.put_along_axis(win, idx[..., None].astype(np.intp), grad[..., None], axis=-1)
    win = win.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(win.reshape(n, c, 2 * h2, 2 * w2))


def _up1d(x, axis):
    x = np.moveaxis(x, axis, -1)
    length = x.shape[-1]
    prev = np.concatenate([x[..., :1], x[..., :-1]], axis=-1)
    nxt = np.concatenate([x[..., 1:], x[..., -1:]], axis=-1)
    even = x + 0.25 * (prev - x)
    odd = x + 0.25 * (nxt - x)
    even[..., 0] = x[..., 0]
    odd[..., -1] = x[..., -1]
    out = np.empty(x.shape[:-1] + (2 * length,), dtype=x.dtype)
    out[..., 0::2] = even
    out[..., 1::2] = odd
    return np.ascontiguousarray(np.moveaxis(out, -1, axis))


def _up1d_backward(g, axis):
    g = np.moveaxis(g, axis, -1)
    length = g.shape[-1] // 2
    ge, go = g[..., 0::2], g[..., 1::2]
    dt = g.dtype.type
    wa = np.full(length, 0.75, dtype=g.dtype)
    wb = np.full(length, 0.75, dtype=g.dtype)
    wa[0] = 1.0
    wb[-1] = 1.0
    c = np.zeros_like(ge)
    d = np.zeros_like(ge)
    # out[2i-1] and out[2i+2] read x[i] as their 0.25-weighted neighbour
    c[..., 1:] = dt(0.25) * go[..., :-1]
    d[..., :-1] = dt(0.25) * ge[..., 1:]
    dx = ((ge * wa + go * wb) + c) + d
    return np.ascontiguousarray(np.moveaxis(dx, -1, axis))


def upsample2x_forward(x):
    """Bilinear 2x, align_corners=False; H pass then W pass."""
    return _up1d(_up1d(x, 2), 3)


def upsample2x_backward(grad):
    return _up1d_backward(_up1d_backward(grad, 3), 2)


def rmsprop_update(p, g, v, m, lr, alpha, momentum, weight_decay, eps):
    """In-place RMSProp step with heavy-ball momentum; ``eps`` sits inside the sqrt.

    g' = g + wd * p;  v = alpha * v + (1 - alpha) * g'^2;
    m = momentum * m + g' / sqrt(v + eps);  p = p - lr * m
    Scalars are rounded to the array dtype first, as the compiled twin does.
    """
    dt = p.dtype.type
    wd, a, b, mu, e, r = (dt(weight_decay), dt(alpha), dt(1.0 - alpha), dt(momentum),
                          dt(eps), dt(lr))
    gp = g + wd * p
    v *= a
    v += b * (gp * gp)
    m *= mu
    m += gp / np.sqrt(v + e)
    p -= r * m
