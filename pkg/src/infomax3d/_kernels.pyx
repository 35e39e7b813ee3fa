# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Direct-loop 3D convolution and max-pooling kernels.

Single-threaded by design: the accumulation order is fixed, so outputs and
gradients are bit-for-bit reproducible across runs. Inner loops run over
the contiguous W axis so the compiler can vectorize the stride-1 case.
"""

import numpy as np

ctypedef fused real:
    float
    double


cdef inline Py_ssize_t _out_dim(Py_ssize_t dim, Py_ssize_t k, Py_ssize_t s, Py_ssize_t p) noexcept nogil:
    return (dim + 2 * p - k) // s + 1


cdef inline (Py_ssize_t, Py_ssize_t) _valid_range(Py_ssize_t dim, Py_ssize_t s, Py_ssize_t p,
                                                  Py_ssize_t koff, Py_ssize_t odim) noexcept nogil:
    # Output indices o such that o*s + koff - p lands inside [0, dim).
    cdef Py_ssize_t lo = 0, hi, num
    if p > koff:
        lo = (p - koff + s - 1) // s
    num = dim - 1 + p - koff
    if num < 0:
        return 0, 0
    hi = num // s + 1
    if hi > odim:
        hi = odim
    if lo > hi:
        lo = hi
    return lo, hi


def conv3d_forward(real[:, :, :, :, ::1] x, real[:, :, :, :, ::1] w, int stride, int pad):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1]
    cdef Py_ssize_t D = x.shape[2], H = x.shape[3], W = x.shape[4]
    cdef Py_ssize_t Co = w.shape[0], K = w.shape[2]
    cdef Py_ssize_t Do = _out_dim(D, K, stride, pad)
    cdef Py_ssize_t Ho = _out_dim(H, K, stride, pad)
    cdef Py_ssize_t Wo = _out_dim(W, K, stride, pad)

    if real is float:
        out_arr = np.zeros((B, Co, Do, Ho, Wo), dtype=np.float32)
    else:
        out_arr = np.zeros((B, Co, Do, Ho, Wo), dtype=np.float64)
    cdef real[:, :, :, :, ::1] y = out_arr

    cdef Py_ssize_t b, co, ci, kd, kh, kw, od, oh, ow, id_, ih, i, n, io
    cdef Py_ssize_t od_lo, od_hi, oh_lo, oh_hi, ow_lo, ow_hi
    cdef real wv
    cdef real *yrow
    cdef const real *xrow
    cdef const real *xoff

    with nogil:
        for b in range(B):
            for co in range(Co):
                for ci in range(C):
                    for kd in range(K):
                        od_lo, od_hi = _valid_range(D, stride, pad, kd, Do)
                        for kh in range(K):
                            oh_lo, oh_hi = _valid_range(H, stride, pad, kh, Ho)
                            for kw in range(K):
                                ow_lo, ow_hi = _valid_range(W, stride, pad, kw, Wo)
                                n = ow_hi - ow_lo
                                if n <= 0:
                                    continue
                                wv = w[co, ci, kd, kh, kw]
                                for od in range(od_lo, od_hi):
                                    id_ = od * stride + kd - pad
                                    for oh in range(oh_lo, oh_hi):
                                        ih = oh * stride + kh - pad
                                        yrow = &y[b, co, od, oh, ow_lo]
                                        xrow = &x[b, ci, id_, ih, 0]
                                        if stride == 1:
                                            xoff = xrow + (ow_lo + kw - pad)
                                            for i in range(n):
                                                yrow[i] += wv * xoff[i]
                                        else:
                                            io = ow_lo * stride + kw - pad
                                            for i in range(n):
                                                yrow[i] += wv * xrow[io]
                                                io += stride
    return out_arr


def conv3d_backward(real[:, :, :, :, ::1] x, real[:, :, :, :, ::1] w,
                    real[:, :, :, :, ::1] gy, int stride, int pad):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1]
    cdef Py_ssize_t D = x.shape[2], H = x.shape[3], W = x.shape[4]
    cdef Py_ssize_t Co = w.shape[0], K = w.shape[2]
    cdef Py_ssize_t Do = gy.shape[2], Ho = gy.shape[3], Wo = gy.shape[4]

    if real is float:
        gx_arr = np.zeros((B, C, D, H, W), dtype=np.float32)
        gw_arr = np.zeros((Co, C, K, K, K), dtype=np.float32)
    else:
        gx_arr = np.zeros((B, C, D, H, W), dtype=np.float64)
        gw_arr = np.zeros((Co, C, K, K, K), dtype=np.float64)
    cdef real[:, :, :, :, ::1] gx = gx_arr
    cdef real[:, :, :, :, ::1] gw = gw_arr

    cdef Py_ssize_t b, co, ci, kd, kh, kw, od, oh, ow, id_, ih, i, n, io
    cdef Py_ssize_t od_lo, od_hi, oh_lo, oh_hi, ow_lo, ow_hi
    cdef real wv, acc
    cdef const real *gyrow
    cdef const real *xrow
    cdef const real *xoff
    cdef real *gxrow
    cdef real *gxoff

    with nogil:
        for b in range(B):
            for co in range(Co):
                for ci in range(C):
                    for kd in range(K):
                        od_lo, od_hi = _valid_range(D, stride, pad, kd, Do)
                        for kh in range(K):
                            oh_lo, oh_hi = _valid_range(H, stride, pad, kh, Ho)
                            for kw in range(K):
                                ow_lo, ow_hi = _valid_range(W, stride, pad, kw, Wo)
                                n = ow_hi - ow_lo
                                if n <= 0:
                                    continue
                                wv = w[co, ci, kd, kh, kw]
                                acc = 0
                                for od in range(od_lo, od_hi):
                                    id_ = od * stride + kd - pad
                                    for oh in range(oh_lo, oh_hi):
                                        ih = oh * stride + kh - pad
                                        gyrow = &gy[b, co, od, oh, ow_lo]
                                        xrow = &x[b, ci, id_, ih, 0]
                                        gxrow = &gx[b, ci, id_, ih, 0]
                                        if stride == 1:
                                            xoff = xrow + (ow_lo + kw - pad)
                                            gxoff = gxrow + (ow_lo + kw - pad)
                                            for i in range(n):
                                                gxoff[i] += wv * gyrow[i]
                                                acc += xoff[i] * gyrow[i]
                                        else:
                                            io = ow_lo * stride + kw - pad
                                            for i in range(n):
                                                gxrow[io] += wv * gyrow[i]
                                                acc += xrow[io] * gyrow[i]
                                                io += stride
                                gw[co, ci, kd, kh, kw] += acc
    return gx_arr, gw_arr


def maxpool3d_forward(real[:, :, :, :, ::1] x, int kernel, int stride):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1]
    cdef Py_ssize_t D = x.shape[2], H = x.shape[3], W = x.shape[4]
    cdef Py_ssize_t Do = (D - kernel) // stride + 1
    cdef Py_ssize_t Ho = (H - kernel) // stride + 1
    cdef Py_ssize_t Wo = (W - kernel) // stride + 1

    if real is float:
        out_arr = np.empty((B, C, Do, Ho, Wo), dtype=np.float32)
    else:
        out_arr = np.empty((B, C, Do, Ho, Wo), dtype=np.float64)
    idx_arr = np.empty((B, C, Do, Ho, Wo), dtype=np.int64)
    cdef real[:, :, :, :, ::1] y = out_arr
    cdef long long[:, :, :, :, ::1] idx = idx_arr

    cdef Py_ssize_t b, c, od, oh, ow, kd, kh, kw, id_, ih, iw
    cdef real best, v
    cdef Py_ssize_t best_idx

    with nogil:
        for b in range(B):
            for c in range(C):
                for od in range(Do):
                    for oh in range(Ho):
                        for ow in range(Wo):
                            best = x[b, c, od * stride, oh * stride, ow * stride]
                            best_idx = (od * stride * H + oh * stride) * W + ow * stride
                            for kd in range(kernel):
                                id_ = od * stride + kd
                                for kh in range(kernel):
                                    ih = oh * stride + kh
                                    for kw in range(kernel):
                                        iw = ow * stride + kw
                                        v = x[b, c, id_, ih, iw]
                                        if v > best:
                                            best = v
                                            best_idx = (id_ * H + ih) * W + iw
                            y[b, c, od, oh, ow] = best
                            idx[b, c, od, oh, ow] = best_idx
    return out_arr, idx_arr


def maxpool3d_backward(real[:, :, :, :, ::1] gy, long long[:, :, :, :, ::1] idx,
                       Py_ssize_t D, Py_ssize_t H, Py_ssize_t W):
    cdef Py_ssize_t B = gy.shape[0], C = gy.shape[1]
    cdef Py_ssize_t Do = gy.shape[2], Ho = gy.shape[3], Wo = gy.shape[4]

    if real is float:
        gx_arr = np.zeros((B, C, D * H * W), dtype=np.float32)
    else:
        gx_arr = np.zeros((B, C, D * H * W), dtype=np.float64)
    cdef real[:, :, ::1] gx = gx_arr

    cdef Py_ssize_t b, c, od, oh, ow
    cdef Py_ssize_t flat

    with nogil:
        for b in range(B):
            for c in range(C):
                for od in range(Do):
                    for oh in range(Ho):
                        for ow in range(Wo):
                            flat = idx[b, c, od, oh, ow]
                            gx[b, c, flat] += gy[b, c, od, oh, ow]
    return gx_arr.reshape(B, C, D, H, W)
