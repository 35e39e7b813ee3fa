"""Vectorized numpy implementations of the convolution/pooling kernels.

Same call signatures as the compiled extension; used as the fallback when
the extension is not built (or when forced via ``INFOMAX3D_KERNELS=numpy``).
Convolutions go through sliding-window views plus BLAS contractions.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _pad_spatial(x, pad):
    if pad == 0:
        return x
    width = [(0, 0), (0, 0)] + [(pad, pad)] * 3
    return np.pad(x, width)


def conv3d_forward(x, w, stride, pad):
    k = w.shape[2]
    xp = _pad_spatial(x, pad)
    win = sliding_window_view(xp, (k, k, k), axis=(2, 3, 4))
    win = win[:, :, ::stride, ::stride, ::stride]
    # contract over (Cin, kd, kh, kw) -> (B, Do, Ho, Wo, Cout)
    y = np.tensordot(win, w, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
    return np.ascontiguousarray(np.moveaxis(y, 4, 1))


def conv3d_backward(x, w, gy, stride, pad):
    k = w.shape[2]
    b, c = x.shape[:2]
    co = w.shape[0]
    do, ho, wo = gy.shape[2:]
    xp = _pad_spatial(x, pad)
    # weight gradient: one contraction against the forward's window view
    win = sliding_window_view(xp, (k, k, k), axis=(2, 3, 4))
    win = win[:, :, ::stride, ::stride, ::stride]
    gw = np.einsum("bodhw,bcdhwijk->ocijk", gy, win, optimize=True)
    # input gradient: one GEMM into per-offset columns, then scatter-add
    gyf = gy.reshape(b, co, do * ho * wo)
    gcols = np.tensordot(gyf, w.reshape(co, -1), axes=(1, 0))
    gcols = gcols.reshape(b, do * ho * wo, c, k, k, k)
    gxp = np.zeros_like(xp)
    for kd in range(k):
        for kh in range(k):
            for kw in range(k):
                sl = (
                    slice(None),
                    slice(None),
                    slice(kd, kd + stride * do, stride),
                    slice(kh, kh + stride * ho, stride),
                    slice(kw, kw + stride * wo, stride),
                )
                block = np.moveaxis(gcols[:, :, :, kd, kh, kw], 2, 1)
                gxp[sl] += block.reshape(b, c, do, ho, wo)
    if pad:
        gx = gxp[:, :, pad:-pad, pad:-pad, pad:-pad]
    else:
        gx = gxp
    return np.ascontiguousarray(gx), np.ascontiguousarray(gw)


def maxpool3d_forward(x, kernel, stride):
    b, c, d, h, w = x.shape
    win = sliding_window_view(x, (kernel, kernel, kernel), axis=(2, 3, 4))
    win = win[:, :, ::stride, ::stride, ::stride]
    do, ho, wo = win.shape[2:5]
    flat = win.reshape(b, c, do, ho, wo, kernel**3)
    # np.argmax keeps the first occurrence, i.e. first index in window order
    local = np.argmax(flat, axis=-1)
    y = np.take_along_axis(flat, local[..., None], axis=-1)[..., 0]
    kd, rem = np.divmod(local, kernel * kernel)
    kh, kw = np.divmod(rem, kernel)
    od = np.arange(do)[:, None, None] * stride
    oh = np.arange(ho)[None, :, None] * stride
    ow = np.arange(wo)[None, None, :] * stride
    idx = ((od + kd) * h + (oh + kh)) * w + (ow + kw)
    return np.ascontiguousarray(y), idx.astype(np.int64)


def maxpool3d_backward(gy, idx, d, h, w):
    b, c = gy.shape[:2]
    gx = np.zeros((b, c, d * h * w), dtype=gy.dtype)
    bc = b * c
    flat_idx = (np.arange(bc)[:, None] * (d * h * w) + idx.reshape(bc, -1)).ravel()
    np.add.at(gx.reshape(-1), flat_idx, gy.reshape(-1))
    return gx.reshape(b, c, d, h, w)
