"""Differentiable primitives on NCHW tensors.

Convolutions go through im2col + one GEMM; the loop-heavy pieces (unfold,
fold, 2x2 max pooling, bilinear doubling) come from :mod:`.kernels`.
"""

import numpy as np
from scipy.special import expit

from ..errors import DimensionError
from . import kernels
from .tensor import Tensor, as_tensor, record

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
NORM_EPS = 1e-12


def _need_4d(x, op):
    if x.ndim != 4:
        raise DimensionError(f"{op} expects a 4-D NCHW tensor, got shape {x.shape}")


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlation of ``x[N,Cin,H,W]`` with ``weight[Cout,Cin,kh,kw]``."""
    _need_4d(x, "conv2d")
    if weight.ndim != 4:
        raise DimensionError(f"conv2d weight must be 4-D, got {weight.shape}")
    n, c, h, w = x.shape
    co, ci, kh, kw = weight.shape
    if ci != c:
        raise DimensionError(f"conv2d: input has {c} channels, weight expects {ci}")
    if bias is not None and bias.shape != (co,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({co},)")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} does not fit input {h}x{w}")

    pointwise = kh == kw == 1 and stride == 1 and padding == 0
    if pointwise:
        cols = x.data.transpose(1, 0, 2, 3).reshape(c, n * h * w)
    else:
        cols = kernels.im2col(x.data, kh, kw, stride, padding)
    wmat = weight.data.reshape(co, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(co, n, ho, wo).transpose(1, 0, 2, 3))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gm = g.transpose(1, 0, 2, 3).reshape(co, -1)
        dw = (gm @ cols.T).reshape(weight.shape)
        dx = None
        if x.requires_grad:
            dcols = wmat.T @ gm
            if pointwise:
                dx = np.ascontiguousarray(dcols.reshape(c, n, h, w).transpose(1, 0, 2, 3))
            else:
                dx = kernels.col2im(dcols, x.shape, kh, kw, stride, padding)
        if bias is None:
            return dx, dw
        return dx, dw, gm.sum(axis=1)

    return record("conv2d", out, parents, bw)


def conv_transpose2d_2x(x, weight, bias=None):
    """Stride-2, kernel-2 transposed convolution; ``weight[Cin,Cout,2,2]``."""
    _need_4d(x, "conv_transpose2d_2x")
    n, c, h, w = x.shape
    if weight.ndim != 4 or weight.shape[0] != c or weight.shape[2:] != (2, 2):
        raise DimensionError(
            f"conv_transpose2d_2x: weight {weight.shape} incompatible with input channels {c}")
    co = weight.shape[1]
    if bias is not None and bias.shape != (co,):
        raise DimensionError(f"conv_transpose2d_2x: bias shape {bias.shape} != ({co},)")
    xm = x.data.transpose(1, 0, 2, 3).reshape(c, n * h * w)
    wm = weight.data.reshape(c, co * 4).T
    y = (wm @ xm).reshape(co, 2, 2, n, h, w).transpose(3, 0, 4, 1, 5, 2)
    out = np.ascontiguousarray(y.reshape(n, co, 2 * h, 2 * w))
    if bias is not None:
        out += bias.data[None, :, None, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gy = g.reshape(n, co, h, 2, w, 2).transpose(1, 3, 5, 0, 2, 4).reshape(co * 4, -1)
        dw = (gy @ xm.T).T.reshape(weight.shape)
        dx = None
        if x.requires_grad:
            dx = np.ascontiguousarray((wm.T @ gy).reshape(c, n, h, w).transpose(1, 0, 2, 3))
        if bias is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 2, 3))

    return record("conv_transpose2d_2x", out, parents, bw)


def batch_norm2d(x, gamma, beta, running_mean, running_var, training,
                 momentum=BN_MOMENTUM, eps=BN_EPS):
    """Per-channel batch normalization.

    In training mode the batch statistics are used and the running buffers
    (plain numpy arrays) are updated in place; the running variance uses the
    unbiased estimate. In eval mode the running buffers are used as-is.
    """
    _need_4d(x, "batch_norm2d")
    n, c, h, w = x.shape
    if h * w == 0:
        raise DimensionError("batch_norm2d: zero spatial extent")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batch_norm2d: affine parameters must have shape ({c},)")
    xd = x.data
    ga = gamma.data[None, :, None, None]
    if training:
        xhat, inv_std = _bn_train(xd, running_mean, running_var, momentum, eps)
    else:
        inv_std = 1.0 / np.sqrt(running_var + eps)
        xhat = (xd - running_mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = xhat * ga + beta.data[None, :, None, None]

    def bw(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dx = None
        if x.requires_grad:
            dxhat = g * ga
            if training:
                dx = _bn_train_bw(dxhat, xhat, inv_std)
            else:
                dx = dxhat * inv_std[None, :, None, None]
        return dx, dgamma, dbeta

    return record("batch_norm2d", out, (x, gamma, beta), bw)


def _bn_train(xd, running_mean, running_var, momentum, eps):
    n, _, h, w = xd.shape
    m = n * h * w
    if m < 2:
        raise DimensionError("batch_norm2d: training mode needs N*H*W >= 2")
    mean = xd.mean(axis=(0, 2, 3))
    xc = xd - mean[None, :, None, None]
    var = (xc * xc).mean(axis=(0, 2, 3))
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std[None, :, None, None]
    running_mean *= 1.0 - momentum
    running_mean += momentum * mean
    running_var *= 1.0 - momentum
    running_var += momentum * var * (m / (m - 1))
    return xhat, inv_std


def _bn_train_bw(dxhat, xhat, inv_std):
    n, _, h, w = xhat.shape
    m = n * h * w
    s1 = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
    s2 = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
    return (dxhat - s1 / m - xhat * (s2 / m)) * inv_std[None, :, None, None]


def relu(x):
    xd = x.data
    out = np.maximum(xd, 0)
    return record("relu", out, (x,), lambda g: (g * (xd > 0),))


def max_pool2d(x):
    """Non-overlapping 2x2 max pooling; ties route the gradient to the first element."""
    _need_4d(x, "max_pool2d")
    h, w = x.shape[2:]
    if h % 2 or w % 2:
        raise DimensionError(f"max_pool2d needs even H and W, got {h}x{w}")
    out, idx = kernels.maxpool2x2_forward(x.data)
    return record("max_pool2d", out, (x,), lambda g: (kernels.maxpool2x2_backward(g, idx),))


def upsample_bilinear2x(x):
    """Exact 2x bilinear upsampling, align_corners=False."""
    _need_4d(x, "upsample_bilinear2x")
    out = kernels.upsample2x_forward(x.data)
    return record("upsample_bilinear2x", out, (x,), lambda g: (kernels.upsample2x_backward(g),))


def global_avg_pool(x):
    _need_4d(x, "global_avg_pool")
    n, c, h, w = x.shape
    if h * w == 0:
        raise DimensionError("global_avg_pool: empty spatial extent")
    area = float(h * w)
    out = x.data.sum(axis=(2, 3)) / area

    def bw(g):
        return (np.broadcast_to((g / area)[:, :, None, None], x.shape).copy(),)

    return record("global_avg_pool", out, (x,), bw)


def masked_avg_pool(x, mask):
    """Mean of ``x`` over positions where ``mask`` (constant, ``[N,1,h,w]``) is 1.

    The denominator is floored at 1, so an empty mask yields a zero vector.
    With an all-ones mask the result equals :func:`global_avg_pool` bit-for-bit.
    """
    _need_4d(x, "masked_avg_pool")
    m = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=x.dtype)
    n, c, h, w = x.shape
    if m.shape != (n, 1, h, w):
        raise DimensionError(f"masked_avg_pool: mask shape {m.shape} != {(n, 1, h, w)}")
    denom = np.maximum(m.sum(axis=(2, 3)), 1.0)
    out = (x.data * m).sum(axis=(2, 3)) / denom

    def bw(g):
        return ((g / denom)[:, :, None, None] * m,)

    return record("masked_avg_pool", out, (x,), bw)


def linear(x, weight, bias=None):
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        dx = g @ wd if x.requires_grad else None
        dw = g.T @ xd
        if bias is None:
            return dx, dw
        return dx, dw, g.sum(axis=0)

    return record("linear", out, parents, bw)


def l2_normalize(x, eps=NORM_EPS):
    """Scale each row to unit L2 norm; rows with norm below ``eps`` are divided by ``eps``."""
    if x.ndim != 2:
        raise DimensionError(f"l2_normalize expects [N,D], got {x.shape}")
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=1, keepdims=True))
    denom = np.maximum(norm, eps)
    y = xd / denom
    big = norm > eps

    def bw(g):
        proj = (y * g).sum(axis=1, keepdims=True)
        return (np.where(big, g - y * proj, g) / denom,)

    return record("l2_normalize", y, (x,), bw)


def concat(tensors, axis=1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, bounds, axis=axis))

    return record("concat", out, tuple(tensors), bw)


def sigmoid(x):
    y = expit(x.data)
    return record("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def softmax(x, axis=1):
    xd = x.data
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return record("softmax", y, (x,), bw)


def narrow(x, start, stop):
    """Rows ``start:stop`` of the leading axis."""
    shape = x.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[start:stop] = g
        return (full,)

    return record("narrow", np.ascontiguousarray(x.data[start:stop]), (x,), bw)
