# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled NHWC convolution/pooling kernels.

Same contracts as ``_kernels_py``; selected by ``backend`` when importable.
"""
import numpy as np
cimport numpy as cnp
from libc.string cimport memcpy, memset

cnp.import_array()

ctypedef fused real:
    float
    double


def out_size(Py_ssize_t size, Py_ssize_t k, Py_ssize_t stride, Py_ssize_t pad):
    return (size + 2 * pad - k) // stride + 1


cdef void _im2col(const real[:, :, :, ::1] x, real[:, ::1] cols, Py_ssize_t kh, Py_ssize_t kw,
                  Py_ssize_t stride, Py_ssize_t pad, Py_ssize_t ho, Py_ssize_t wo) noexcept nogil:
    # one kernel row (kw * C values) is contiguous in NHWC, so copy it whole
    # whenever the window row lies fully inside the image
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], w = x.shape[2], c = x.shape[3]
    cdef Py_ssize_t b, oy, ox, i, j, iy, ix0, ix, row, col
    cdef size_t chunk = c * sizeof(real)
    cdef size_t run = kw * c * sizeof(real)
    row = 0
    for b in range(n):
        for oy in range(ho):
            for ox in range(wo):
                col = 0
                ix0 = ox * stride - pad
                for i in range(kh):
                    iy = oy * stride + i - pad
                    if iy < 0 or iy >= h:
                        memset(&cols[row, col], 0, run)
                    elif ix0 >= 0 and ix0 + kw <= w:
                        memcpy(&cols[row, col], &x[b, iy, ix0, 0], run)
                    else:
                        for j in range(kw):
                            ix = ix0 + j
                            if ix < 0 or ix >= w:
                                memset(&cols[row, col + j * c], 0, chunk)
                            else:
                                memcpy(&cols[row, col + j * c], &x[b, iy, ix, 0], chunk)
                    col += kw * c
                row += 1


def im2col(x, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride, Py_ssize_t pad):
    x = np.ascontiguousarray(x)
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], w = x.shape[2], c = x.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - kw) // stride + 1
    cols = np.empty((n * ho * wo, kh * kw * c), dtype=x.dtype)
    if x.dtype == np.float32:
        _im2col[float](x, cols, kh, kw, stride, pad, ho, wo)
    elif x.dtype == np.float64:
        _im2col[double](x, cols, kh, kw, stride, pad, ho, wo)
    else:
        raise TypeError(f"im2col: unsupported dtype {x.dtype}")
    return cols


cdef void _col2im(const real[:, ::1] cols, real[:, :, :, ::1] dx, Py_ssize_t kh, Py_ssize_t kw,
                  Py_ssize_t stride, Py_ssize_t pad, Py_ssize_t ho, Py_ssize_t wo) noexcept nogil:
    cdef Py_ssize_t n = dx.shape[0], h = dx.shape[1], w = dx.shape[2], c = dx.shape[3]
    cdef Py_ssize_t b, oy, ox, i, j, iy, ix0, row, col, t, lo, hi
    cdef real* dst
    cdef const real* src
    row = 0
    for b in range(n):
        for oy in range(ho):
            for ox in range(wo):
                col = 0
                ix0 = ox * stride - pad
                lo = 0 if ix0 >= 0 else -ix0
                hi = kw if ix0 + kw <= w else w - ix0
                for i in range(kh):
                    iy = oy * stride + i - pad
                    if 0 <= iy < h and lo < hi:
                        dst = &dx[b, iy, ix0 + lo, 0]
                        src = &cols[row, col + lo * c]
                        for t in range((hi - lo) * c):
                            dst[t] += src[t]
                    col += kw * c
                row += 1


def col2im(cols, x_shape, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride, Py_ssize_t pad):
    cols = np.ascontiguousarray(cols)
    n, h, w, c = x_shape
    cdef Py_ssize_t ho = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - kw) // stride + 1
    dx = np.zeros((n, h, w, c), dtype=cols.dtype)
    if cols.dtype == np.float32:
        _col2im[float](cols, dx, kh, kw, stride, pad, ho, wo)
    elif cols.dtype == np.float64:
        _col2im[double](cols, dx, kh, kw, stride, pad, ho, wo)
    else:
        raise TypeError(f"col2im: unsupported dtype {cols.dtype}")
    return dx


cdef void _pool_fwd(const real[:, :, :, ::1] x, real[:, :, :, ::1] out, signed char[:, :, :, ::1] arg) noexcept nogil:
    cdef Py_ssize_t n = out.shape[0], h2 = out.shape[1], w2 = out.shape[2], c = out.shape[3]
    cdef Py_ssize_t b, y, xx, ch, k
    cdef real best, v
    cdef signed char bk
    for b in range(n):
        for y in range(h2):
            for xx in range(w2):
                for ch in range(c):
                    best = x[b, 2 * y, 2 * xx, ch]
                    bk = 0
                    v = x[b, 2 * y, 2 * xx + 1, ch]
                    if v > best:
                        best = v
                        bk = 1
                    v = x[b, 2 * y + 1, 2 * xx, ch]
                    if v > best:
                        best = v
                        bk = 2
                    v = x[b, 2 * y + 1, 2 * xx + 1, ch]
                    if v > best:
                        best = v
                        bk = 3
                    out[b, y, xx, ch] = best
                    arg[b, y, xx, ch] = bk


def maxpool2_forward(x):
    """2x2/stride-2 max pool. Returns the pooled map and the flat window argmax."""
    x = np.ascontiguousarray(x)
    n, h, w, c = x.shape
    out = np.empty((n, h // 2, w // 2, c), dtype=x.dtype)
    arg = np.empty((n, h // 2, w // 2, c), dtype=np.int8)
    if x.dtype == np.float32:
        _pool_fwd[float](x, out, arg)
    elif x.dtype == np.float64:
        _pool_fwd[double](x, out, arg)
    else:
        raise TypeError(f"maxpool2: unsupported dtype {x.dtype}")
    return out, arg


cdef void _pool_bwd(const real[:, :, :, ::1] dout, const signed char[:, :, :, ::1] arg, real[:, :, :, ::1] dx) noexcept nogil:
    cdef Py_ssize_t n = dout.shape[0], h2 = dout.shape[1], w2 = dout.shape[2], c = dout.shape[3]
    cdef Py_ssize_t b, y, xx, ch
    cdef signed char k
    for b in range(n):
        for y in range(h2):
            for xx in range(w2):
                for ch in range(c):
                    k = arg[b, y, xx, ch]
                    dx[b, 2 * y + (k >> 1), 2 * xx + (k & 1), ch] = dout[b, y, xx, ch]


def maxpool2_backward(dout, arg, x_shape):
    dout = np.ascontiguousarray(dout)
    arg = np.ascontiguousarray(arg)
    dx = np.zeros(x_shape, dtype=dout.dtype)
    if dout.dtype == np.float32:
        _pool_bwd[float](dout, arg, dx)
    elif dout.dtype == np.float64:
        _pool_bwd[double](dout, arg, dx)
    else:
        raise TypeError(f"maxpool2: unsupported dtype {dout.dtype}")
    return dx

