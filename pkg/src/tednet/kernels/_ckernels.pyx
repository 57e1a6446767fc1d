# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels: im2col/col2im with padding and dilation, pooling and
nearest up-sampling.

Tap order and accumulation order match ``_pykernels`` exactly.
"""
import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.stdlib cimport malloc, free

cnp.import_array()


def im2col(floating[:, :, :, ::1] x, int kh, int kw, int sh, int sw,
           int ph, int pw, int dh, int dw, int ho, int wo):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    dtype = np.float32 if floating is float else np.float64
    out = np.empty((n, c * kh * kw, ho * wo), dtype=dtype)
    cdef floating[:, :, ::1] cols = out
    cdef Py_ssize_t b, ch, i, j, oy, ox, row, iy, ox0, ox1, off
    cdef floating* dst
    cdef const floating* src
    for b in range(n):
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    row = (ch * kh + i) * kw + j
                    # valid output columns for this tap: 0 <= ox*sw - pw + j*dw < w
                    ox0 = 0
                    while ox0 < wo and ox0 * sw - pw + j * dw < 0:
                        ox0 += 1
                    ox1 = wo
                    while ox1 > ox0 and (ox1 - 1) * sw - pw + j * dw >= w:
                        ox1 -= 1
                    off = j * dw - pw
                    for oy in range(ho):
                        dst = &cols[b, row, oy * wo]
                        iy = oy * sh - ph + i * dh
                        if iy < 0 or iy >= h:
                            for ox in range(wo):
                                dst[ox] = 0
                            continue
                        src = &x[b, ch, iy, 0]
                        for ox in range(ox0):
                            dst[ox] = 0
                        if sw == 1:
                            for ox in range(ox0, ox1):
                                dst[ox] = src[ox + off]
                        else:
                            for ox in range(ox0, ox1):
                                dst[ox] = src[ox * sw + off]
                        for ox in range(ox1, wo):
                            dst[ox] = 0
    return out


def col2im(floating[:, :, ::1] cols, int c, int h, int w, int kh, int kw,
           int sh, int sw, int ph, int pw, int dh, int dw, int ho, int wo):
    cdef Py_ssize_t n = cols.shape[0]
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((n, c, h, w), dtype=dtype)
    cdef floating[:, :, :, ::1] x = out
    cdef Py_ssize_t b, ch, i, j, oy, ox, row, iy, ox0, ox1, off
    cdef floating* dst
    cdef const floating* src
    for b in range(n):
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    row = (ch * kh + i) * kw + j
                    ox0 = 0
                    while ox0 < wo and ox0 * sw - pw + j * dw < 0:
                        ox0 += 1
                    ox1 = wo
                    while ox1 > ox0 and (ox1 - 1) * sw - pw + j * dw >= w:
                        ox1 -= 1
                    off = j * dw - pw
                    for oy in range(ho):
                        iy = oy * sh - ph + i * dh
                        if iy < 0 or iy >= h:
                            continue
                        src = &cols[b, row, oy * wo]
                        dst = &x[b, ch, iy, 0]
                        if sw == 1:
                            for ox in range(ox0, ox1):
                                dst[ox + off] += src[ox]
                        else:
                            for ox in range(ox0, ox1):
                                dst[ox * sw + off] += src[ox]
    return out


def maxpool2_forward(floating[:, :, :, ::1] x):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1]
    cdef Py_ssize_t ho = x.shape[2] // 2, wo = x.shape[3] // 2
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.empty((n, c, ho, wo), dtype=dtype)
    idx_arr = np.empty((n, c, ho, wo), dtype=np.int8)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef cnp.int8_t[:, :, :, ::1] idx = idx_arr
    cdef Py_ssize_t b, ch, oy, ox
    cdef floating best, v
    cdef cnp.int8_t k
    for b in range(n):
        for ch in range(c):
            for oy in range(ho):
                for ox in range(wo):
                    best = x[b, ch, 2 * oy, 2 * ox]
                    k = 0
                    v = x[b, ch, 2 * oy, 2 * ox + 1]
                    if v > best:
                        best = v
                        k = 1
                    v = x[b, ch, 2 * oy + 1, 2 * ox]
                    if v > best:
                        best = v
                        k = 2
                    v = x[b, ch, 2 * oy + 1, 2 * ox + 1]
                    if v > best:
                        best = v
                        k = 3
                    out[b, ch, oy, ox] = best
                    idx[b, ch, oy, ox] = k
    return out_arr, idx_arr


def maxpool2_backward(floating[:, :, :, ::1] grad_out, cnp.int8_t[:, :, :, ::1] idx):
    cdef Py_ssize_t n = grad_out.shape[0], c = grad_out.shape[1]
    cdef Py_ssize_t ho = grad_out.shape[2], wo = grad_out.shape[3]
    dtype = np.float32 if floating is float else np.float64
    gx_arr = np.zeros((n, c, 2 * ho, 2 * wo), dtype=dtype)
    cdef floating[:, :, :, ::1] gx = gx_arr
    cdef Py_ssize_t b, ch, oy, ox, k
    for b in range(n):
        for ch in range(c):
            for oy in range(ho):
                for ox in range(wo):
                    k = idx[b, ch, oy, ox]
                    gx[b, ch, 2 * oy + k // 2, 2 * ox + k % 2] = grad_out[b, ch, oy, ox]
    return gx_arr


cdef inline floating _tree_sum(floating* buf, Py_ssize_t m) noexcept nogil:
    # pairwise reduction in place, same pairing as _pykernels._window_sum
    cdef Py_ssize_t t
    while m > 1:
        for t in range(m // 2):
            buf[t] = buf[2 * t] + buf[2 * t + 1]
        if m % 2:
            buf[m // 2] = buf[m - 1]
        m = (m + 1) // 2
    return buf[0]


cdef void _window2_sum(floating[:, :, :, ::1] src, floating[:, :, :, ::1] dst,
                       floating scale) noexcept nogil:
    # 2x2 windows: the pairwise tree is (a + b) + (c + d)
    cdef Py_ssize_t b, ch, oy, ox
    cdef floating* r0
    cdef floating* r1
    for b in range(dst.shape[0]):
        for ch in range(dst.shape[1]):
            for oy in range(dst.shape[2]):
                r0 = &src[b, ch, 2 * oy, 0]
                r1 = &src[b, ch, 2 * oy + 1, 0]
                for ox in range(dst.shape[3]):
                    dst[b, ch, oy, ox] = ((r0[2 * ox] + r0[2 * ox + 1])
                                          + (r1[2 * ox] + r1[2 * ox + 1])) / scale


def avgpool_forward(floating[:, :, :, ::1] x, int k):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1]
    cdef Py_ssize_t ho = x.shape[2] // k, wo = x.shape[3] // k
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.empty((n, c, ho, wo), dtype=dtype)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, ch, oy, ox, i, j
    cdef int kk = k * k
    if k == 2:
        _window2_sum(x, out, 4)
        return out_arr
    cdef floating* buf = <floating*> malloc(kk * sizeof(floating))
    if buf == NULL:
        raise MemoryError()
    try:
        for b in range(n):
            for ch in range(c):
                for oy in range(ho):
                    for ox in range(wo):
                        for i in range(k):
                            for j in range(k):
                                buf[i * k + j] = x[b, ch, k * oy + i, k * ox + j]
                        out[b, ch, oy, ox] = _tree_sum(buf, kk) / kk
    finally:
        free(buf)
    return out_arr


def avgpool_backward(floating[:, :, :, ::1] grad_out, int k):
    cdef Py_ssize_t n = grad_out.shape[0], c = grad_out.shape[1]
    cdef Py_ssize_t ho = grad_out.shape[2], wo = grad_out.shape[3]
    dtype = np.float32 if floating is float else np.float64
    gx_arr = np.empty((n, c, ho * k, wo * k), dtype=dtype)
    cdef floating[:, :, :, ::1] gx = gx_arr
    cdef Py_ssize_t b, ch, oy, ox, i, j
    cdef floating g
    cdef int kk = k * k
    for b in range(n):
        for ch in range(c):
            for oy in range(ho):
                for ox in range(wo):
                    g = grad_out[b, ch, oy, ox] / kk
                    for i in range(k):
                        for j in range(k):
                            gx[b, ch, k * oy + i, k * ox + j] = g
    return gx_arr


def upsample_forward(floating[:, :, :, ::1] x, int f):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.empty((n, c, h * f, w * f), dtype=dtype)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, ch, y, xx, i, j
    cdef floating v
    for b in range(n):
        for ch in range(c):
            for y in range(h):
                for xx in range(w):
                    v = x[b, ch, y, xx]
                    for i in range(f):
                        for j in range(f):
                            out[b, ch, f * y + i, f * xx + j] = v
    return out_arr


def upsample_backward(floating[:, :, :, ::1] grad_out, int f):
    cdef Py_ssize_t n = grad_out.shape[0], c = grad_out.shape[1]
    cdef Py_ssize_t ho = grad_out.shape[2] // f, wo = grad_out.shape[3] // f
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.empty((n, c, ho, wo), dtype=dtype)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, ch, oy, ox, i, j
    if f == 2:
        _window2_sum(grad_out, out, 1)
        return out_arr
    cdef floating* buf = <floating*> malloc(f * f * sizeof(floating))
    if buf == NULL:
        raise MemoryError()
    try:
        for b in range(n):
            for ch in range(c):
                for oy in range(ho):
                    for ox in range(wo):
                        for i in range(f):
                            for j in range(f):
                                buf[i * f + j] = grad_out[b, ch, f * oy + i, f * ox + j]
                        out[b, ch, oy, ox] = _tree_sum(buf, f * f)
    finally:
        free(buf)
    return out_arr
