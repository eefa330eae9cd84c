"""Numpy implementations of the convolution kernels.

Used when the compiled extension is unavailable, and as the reference the
compiled kernels are tested against.
"""

import numpy as np


def out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def im2col(x, kh, kw, stride, pad):
    """(B, C, H, W) -> (B, C*kh*kw, Ho*Wo) in (c, i, j) row order."""
    b, c, h, w = x.shape
    ho, wo = out_size(h, kh, stride, pad), out_size(w, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((b, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(b, c * kh * kw, ho * wo)


def col2im(cols, shape, kh, kw, stride, pad):
    """Adjoint of :func:`im2col`: scatter-add columns back to (B, C, H, W)."""
    b, c, h, w = shape
    ho, wo = out_size(h, kh, stride, pad), out_size(w, kw, stride, pad)
    cols = cols.reshape(b, c, kh, kw, ho, wo)
    xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    return xp[:, :, pad:pad + h, pad:pad + w] if pad else xp


def depthwise_forward(x, weight, stride, pad):
    b, c, h, w = x.shape
    kh, kw = weight.shape[2], weight.shape[3]
    ho, wo = out_size(h, kh, stride, pad), out_size(w, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    out = np.zeros((b, c, ho, wo), dtype=np.result_type(x, weight))
    for i in range(kh):
        for j in range(kw):
            out += xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] * weight[None, :, 0, i, j, None, None]
    return out


def depthwise_backward(grad, x, weight, stride, pad):
    """Returns (grad_x, grad_weight) for :func:`depthwise_forward`."""
    b, c, h, w = x.shape
    kh, kw = weight.shape[2], weight.shape[3]
    ho, wo = grad.shape[2], grad.shape[3]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    dt = np.result_type(grad, x, weight)
    gxp = np.zeros(xp.shape, dtype=dt)
    gw = np.zeros(weight.shape, dtype=dt)
    for i in range(kh):
        for j in range(kw):
            win = (slice(None), slice(None), slice(i, i + stride * ho, stride), slice(j, j + stride * wo, stride))
            gw[:, 0, i, j] = np.einsum("bchw,bchw->c", grad, xp[win])
            gxp[win] += grad * weight[None, :, 0, i, j, None, None]
    gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
    return np.ascontiguousarray(gx), gw
