# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution kernels (float32, NCHW, zero padding).

Each tap (i, j) has a contiguous range of output columns whose input column
is in bounds; computing it once keeps the inner loops branch-free.
"""

import numpy as np
cimport numpy as cnp

cnp.import_array()


cdef inline Py_ssize_t _out(Py_ssize_t size, Py_ssize_t k, Py_ssize_t s, Py_ssize_t p) nogil:
    return (size + 2 * p - k) // s + 1


cdef inline Py_ssize_t _lo(Py_ssize_t off, Py_ssize_t s) nogil:
    # first o >= 0 with o*s + off >= 0
    if off >= 0:
        return 0
    return (-off + s - 1) // s


cdef inline Py_ssize_t _hi(Py_ssize_t off, Py_ssize_t s, Py_ssize_t n, Py_ssize_t limit) nogil:
    # one past the last o < limit with o*s + off < n
    cdef Py_ssize_t h
    if n - off <= 0:
        return 0
    h = (n - off - 1) // s + 1
    return h if h < limit else limit


def im2col(const float[:, :, :, ::1] x, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Ho = _out(H, kh, stride, pad), Wo = _out(W, kw, stride, pad)
    out_arr = np.zeros((B, C * kh * kw, Ho * Wo), dtype=np.float32)
    cdef float[:, :, ::1] out = out_arr
    cdef Py_ssize_t b, c, i, j, oy, ox, iy, row, x0, x1, y0, y1, offx
    cdef const float *src
    cdef float *dst
    with nogil:
        for b in range(B):
            for c in range(C):
                for i in range(kh):
                    y0 = _lo(i - pad, stride)
                    y1 = _hi(i - pad, stride, H, Ho)
                    for j in range(kw):
                        row = (c * kh + i) * kw + j
                        offx = j - pad
                        x0 = _lo(offx, stride)
                        x1 = _hi(offx, stride, W, Wo)
                        for oy in range(y0, y1):
                            iy = oy * stride + i - pad
                            src = &x[b, c, iy, 0]
                            dst = &out[b, row, oy * Wo]
                            if stride == 1:
                                for ox in range(x0, x1):
                                    dst[ox] = src[ox + offx]
                            else:
                                for ox in range(x0, x1):
                                    dst[ox] = src[ox * stride + offx]
    return out_arr


def col2im(const float[:, :, ::1] cols, shape, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t B = shape[0], C = shape[1], H = shape[2], W = shape[3]
    cdef Py_ssize_t Ho = _out(H, kh, stride, pad), Wo = _out(W, kw, stride, pad)
    out_arr = np.zeros((B, C, H, W), dtype=np.float32)
    cdef float[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, c, i, j, oy, ox, iy, row, x0, x1, y0, y1, offx
    cdef const float *src
    cdef float *dst
    with nogil:
        for b in range(B):
            for c in range(C):
                for i in range(kh):
                    y0 = _lo(i - pad, stride)
                    y1 = _hi(i - pad, stride, H, Ho)
                    for j in range(kw):
                        row = (c * kh + i) * kw + j
                        offx = j - pad
                        x0 = _lo(offx, stride)
                        x1 = _hi(offx, stride, W, Wo)
                        for oy in range(y0, y1):
                            iy = oy * stride + i - pad
                            src = &cols[b, row, oy * Wo]
                            dst = &out[b, c, iy, 0]
                            if stride == 1:
                                for ox in range(x0, x1):
                                    dst[ox + offx] += src[ox]
                            else:
                                for ox in range(x0, x1):
                                    dst[ox * stride + offx] += src[ox]
    return out_arr


def depthwise_forward(const float[:, :, :, ::1] x, const float[:, :, :, ::1] weight, int stride, int pad):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t kh = weight.shape[2], kw = weight.shape[3]
    cdef Py_ssize_t Ho = _out(H, kh, stride, pad), Wo = _out(W, kw, stride, pad)
    out_arr = np.zeros((B, C, Ho, Wo), dtype=np.float32)
    cdef float[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, c, i, j, oy, ox, iy, x0, x1, y0, y1, offx
    cdef const float *src
    cdef float *dst
    cdef float wv
    with nogil:
        for b in range(B):
            for c in range(C):
                for i in range(kh):
                    y0 = _lo(i - pad, stride)
                    y1 = _hi(i - pad, stride, H, Ho)
                    for j in range(kw):
                        wv = weight[c, 0, i, j]
                        offx = j - pad
                        x0 = _lo(offx, stride)
                        x1 = _hi(offx, stride, W, Wo)
                        for oy in range(y0, y1):
                            iy = oy * stride + i - pad
                            src = &x[b, c, iy, 0]
                            dst = &out[b, c, oy, 0]
                            if stride == 1:
                                for ox in range(x0, x1):
                                    dst[ox] += wv * src[ox + offx]
                            else:
                                for ox in range(x0, x1):
                                    dst[ox] += wv * src[ox * stride + offx]
    return out_arr


def depthwise_backward(const float[:, :, :, ::1] grad, const float[:, :, :, ::1] x,
                       const float[:, :, :, ::1] weight, int stride, int pad):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t kh = weight.shape[2], kw = weight.shape[3]
    cdef Py_ssize_t Ho = grad.shape[2], Wo = grad.shape[3]
    gx_arr = np.zeros((B, C, H, W), dtype=np.float32)
    gw_arr = np.zeros((C, 1, kh, kw), dtype=np.float32)
    cdef float[:, :, :, ::1] gx = gx_arr
    cdef float[:, :, :, ::1] gw = gw_arr
    cdef Py_ssize_t b, c, i, j, oy, ox, iy, x0, x1, y0, y1, offx
    cdef const float *g
    cdef const float *src
    cdef float *dst
    cdef float wv
    cdef double acc
    with nogil:
        for b in range(B):
            for c in range(C):
                for i in range(kh):
                    y0 = _lo(i - pad, stride)
                    y1 = _hi(i - pad, stride, H, Ho)
                    for j in range(kw):
                        wv = weight[c, 0, i, j]
                        offx = j - pad
                        x0 = _lo(offx, stride)
                        x1 = _hi(offx, stride, W, Wo)
                        acc = 0.0
                        for oy in range(y0, y1):
                            iy = oy * stride + i - pad
                            g = &grad[b, c, oy, 0]
                            src = &x[b, c, iy, 0]
                            dst = &gx[b, c, iy, 0]
                            if stride == 1:
                                for ox in range(x0, x1):
                                    dst[ox + offx] += wv * g[ox]
                                    acc += g[ox] * src[ox + offx]
                            else:
                                for ox in range(x0, x1):
                                    dst[ox * stride + offx] += wv * g[ox]
                                    acc += g[ox] * src[ox * stride + offx]
                        gw[c, 0, i, j] += <float>acc
    return gx_arr, gw_arr
