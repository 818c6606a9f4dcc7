# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels; bit-compatible with ``_pykernels``."""

import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.string cimport memcpy, memset

cnp.import_array()


def out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def _im2col(floating[:, :, :, ::1] x, floating[:, ::1] cols,
            int kh, int kw, int stride, int pad, int ho, int wo):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ci, i, j, b, y, xx, row, iy, x0, x1
    cdef floating *dst
    cdef floating *src
    with nogil:
        for ci in range(c):
            for i in range(kh):
                for j in range(kw):
                    row = (ci * kh + i) * kw + j
                    # output columns whose source lies inside the image
                    x0 = 0
                    while x0 < wo and x0 * stride + j - pad < 0:
                        x0 += 1
                    x1 = wo
                    while x1 > x0 and (x1 - 1) * stride + j - pad >= w:
                        x1 -= 1
                    dst = &cols[row, 0]
                    for b in range(n):
                        for y in range(ho):
                            iy = y * stride + i - pad
                            if iy < 0 or iy >= h:
                                memset(dst, 0, wo * sizeof(floating))
                            else:
                                for xx in range(x0):
                                    dst[xx] = 0
                                src = &x[b, ci, iy, 0]
                                if stride == 1:
                                    if x1 > x0:
                                        memcpy(dst + x0, src + x0 + j - pad,
                                               (x1 - x0) * sizeof(floating))
                                else:
                                    for xx in range(x0, x1):
                                        dst[xx] = src[xx * stride + j - pad]
                                for xx in range(x1, wo):
                                    dst[xx] = 0
                            dst += wo


def im2col(x, int kh, int kw, int stride, int pad):
    x = np.ascontiguousarray(x)
    n, c, h, w = x.shape
    ho, wo = out_size(h, kh, stride, pad), out_size(w, kw, stride, pad)
    cols = np.empty((c * kh * kw, n * ho * wo), dtype=x.dtype)
    _im2col(x, cols, kh, kw, stride, pad, ho, wo)
    return cols


def _col2im(floating[:, ::1] cols, floating[:, :, :, ::1] out,
            int kh, int kw, int stride, int pad, int ho, int wo):
    cdef Py_ssize_t n = out.shape[0], c = out.shape[1], h = out.shape[2], w = out.shape[3]
    cdef Py_ssize_t ci, i, j, b, y, xx, row, col, iy, ix
    # offset-major accumulation mirrors the numpy slice-add loop
    with nogil:
        for i in range(kh):
            for j in range(kw):
                for ci in range(c):
                    row = (ci * kh + i) * kw + j
                    col = 0
                    for b in range(n):
                        for y in range(ho):
                            iy = y * stride + i - pad
                            if iy < 0 or iy >= h:
                                col += wo
                                continue
                            for xx in range(wo):
                                ix = xx * stride + j - pad
                                if ix >= 0 and ix < w:
                                    out[b, ci, iy, ix] += cols[row, col]
                                col += 1


def col2im(cols, shape, int kh, int kw, int stride, int pad):
    cols = np.ascontiguousarray(cols)
    n, c, h, w = shape
    ho, wo = out_size(h, kh, stride, pad), out_size(w, kw, stride, pad)
    out = np.zeros((n, c, h, w), dtype=cols.dtype)
    _col2im(cols, out, kh, kw, stride, pad, ho, wo)
    return out


def _maxpool_fwd(floating[:, :, :, ::1] x, floating[:, :, :, ::1] out,
                 cnp.int8_t[:, :, :, ::1] idx):
    cdef Py_ssize_t n = out.shape[0], c = out.shape[1], h2 = out.shape[2], w2 = out.shape[3]
    cdef Py_ssize_t b, ci, y, xx, k
    cdef floating best, v
    cdef cnp.int8_t arg
    with nogil:
        for b in range(n):
            for ci in range(c):
                for y in range(h2):
                    for xx in range(w2):
                        best = x[b, ci, 2 * y, 2 * xx]
                        arg = 0
                        for k in range(1, 4):
                            v = x[b, ci, 2 * y + k // 2, 2 * xx + k % 2]
                            if v > best:
                                best = v
                                arg = <cnp.int8_t>k
                        out[b, ci, y, xx] = best
                        idx[b, ci, y, xx] = arg


def maxpool2x2_forward(x):
    x = np.ascontiguousarray(x)
    n, c, h, w = x.shape
    out = np.empty((n, c, h // 2, w // 2), dtype=x.dtype)
    idx = np.empty((n, c, h // 2, w // 2), dtype=np.int8)
    _maxpool_fwd(x, out, idx)
    return out, idx


def _maxpool_bwd(floating[:, :, :, ::1] g, cnp.int8_t[:, :, :, ::1] idx,
                 floating[:, :, :, ::1] dx):
    cdef Py_ssize_t n = g.shape[0], c = g.shape[1], h2 = g.shape[2], w2 = g.shape[3]
    cdef Py_ssize_t b, ci, y, xx, k
    with nogil:
        for b in range(n):
            for ci in range(c):
                for y in range(h2):
                    for xx in range(w2):
                        k = idx[b, ci, y, xx]
                        dx[b, ci, 2 * y + k // 2, 2 * xx + k % 2] = g[b, ci, y, xx]


def maxpool2x2_backward(grad, idx):
    grad = np.ascontiguousarray(grad)
    n, c, h2, w2 = grad.shape
    dx = np.zeros((n, c, 2 * h2, 2 * w2), dtype=grad.dtype)
    _maxpool_bwd(grad, np.ascontiguousarray(idx), dx)
    return dx


# Bilinear passes operate on a [rows, L] view along the resampled axis.
def _up_rows(floating[:, ::1] x, floating[:, ::1] out):
    cdef Py_ssize_t rows = x.shape[0], L = x.shape[1], r, i
    cdef floating a
    with nogil:
        for r in range(rows):
            for i in range(L):
                a = x[r, i]
                if i == 0:
                    out[r, 0] = a
                else:
                    out[r, 2 * i] = a + 0.25 * (x[r, i - 1] - a)
                if i == L - 1:
                    out[r, 2 * i + 1] = a
                else:
                    out[r, 2 * i + 1] = a + 0.25 * (x[r, i + 1] - a)


def _up_rows_bwd(floating[:, ::1] g, floating[:, ::1] dx):
    cdef Py_ssize_t rows = dx.shape[0], L = dx.shape[1], r, i
    cdef floating wa, wb, cc, dd
    with nogil:
        for r in range(rows):
            for i in range(L):
                wa = 1.0 if i == 0 else 0.75
                wb = 1.0 if i == L - 1 else 0.75
                cc = 0.25 * g[r, 2 * i - 1] if i >= 1 else 0.0
                dd = 0.25 * g[r, 2 * i + 2] if i <= L - 2 else 0.0
                dx[r, i] = ((g[r, 2 * i] * wa + g[r, 2 * i + 1] * wb) + cc) + dd


def _up_axis(x, axis):
    # 4-D only; positive indices throughout (wraparound is off module-wide)
    x = np.ascontiguousarray(np.moveaxis(x, axis, 3))
    a, b, c, L = x.shape
    out = np.empty((a * b * c, 2 * L), dtype=x.dtype)
    _up_rows(x.reshape(a * b * c, L), out)
    return np.ascontiguousarray(np.moveaxis(out.reshape(a, b, c, 2 * L), 3, axis))


def _up_axis_bwd(g, axis):
    g = np.ascontiguousarray(np.moveaxis(g, axis, 3))
    a, b, c, L2 = g.shape
    dx = np.empty((a * b * c, L2 // 2), dtype=g.dtype)
    _up_rows_bwd(g.reshape(a * b * c, L2), dx)
    return np.ascontiguousarray(np.moveaxis(dx.reshape(a, b, c, L2 // 2), 3, axis))


def upsample2x_forward(x):
    return _up_axis(_up_axis(x, 2), 3)


def upsample2x_backward(grad):
    return _up_axis_bwd(_up_axis_bwd(grad, 3), 2)


cdef extern from "_rmsprop.h":
    void iaunet_rmsprop_f32(float *p, const float *g, float *v, float *m, Py_ssize_t n,
                            float lr, float a, float b, float mu, float wd, float e) nogil
    void iaunet_rmsprop_f64(double *p, const double *g, double *v, double *m, Py_ssize_t n,
                            double lr, double a, double b, double mu, double wd,
                            double e) nogil


def _rmsprop(floating[::1] p, floating[::1] g, floating[::1] v, floating[::1] m,
             floating lr, floating a, floating b, floating mu, floating wd, floating e):
    cdef Py_ssize_t n = p.shape[0]
    if n == 0:
        return
    with nogil:
        if floating is float:
            iaunet_rmsprop_f32(&p[0], &g[0], &v[0], &m[0], n, lr, a, b, mu, wd, e)
        else:
            iaunet_rmsprop_f64(&p[0], &g[0], &v[0], &m[0], n, lr, a, b, mu, wd, e)


def rmsprop_update(p, g, v, m, lr, alpha, momentum, weight_decay, eps):
    dt = p.dtype.type
    _rmsprop(p.reshape(-1), np.ascontiguousarray(g, dtype=p.dtype).reshape(-1),
             v.reshape(-1), m.reshape(-1), dt(lr), dt(alpha), dt(1.0 - alpha),
             dt(momentum), dt(weight_decay), dt(eps))
