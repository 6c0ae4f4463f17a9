# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled depthwise-convolution and overlap kernels.

Accumulation order matches ``fallback.py`` for the forward pass and the input
gradient, so both backends give bit-identical results there.
"""
import numpy as np
cimport numpy as cnp
from cython cimport floating

cnp.import_array()


def dw_forward(floating[:, :, :, ::1] x, floating[:, :, ::1] k, int stride):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], hp = x.shape[2], wp = x.shape[3]
    cdef Py_ssize_t kh = k.shape[1], kw = k.shape[2]
    cdef Py_ssize_t ho = (hp - kh) // stride + 1, wo = (wp - kw) // stride + 1
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.empty((n, c, ho, wo), dtype=dtype)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t a, b, i, j, oy, ox
    cdef floating acc
    with nogil:
        for a in range(n):
            for b in range(c):
                for oy in range(ho):
                    for ox in range(wo):
                        acc = 0
                        for i in range(kh):
                            for j in range(kw):
                                acc = acc + x[a, b, oy * stride + i, ox * stride + j] * k[b, i, j]
                        out[a, b, oy, ox] = acc
    return out_arr


def dw_grad_input(floating[:, :, :, ::1] gout, floating[:, :, ::1] k, int stride,
                  Py_ssize_t hp, Py_ssize_t wp):
    cdef Py_ssize_t n = gout.shape[0], c = gout.shape[1], ho = gout.shape[2], wo = gout.shape[3]
    cdef Py_ssize_t kh = k.shape[1], kw = k.shape[2]
    dtype = np.float32 if floating is float else np.float64
    gx_arr = np.zeros((n, c, hp, wp), dtype=dtype)
    cdef floating[:, :, :, ::1] gx = gx_arr
    cdef Py_ssize_t a, b, i, j, oy, ox
    cdef floating kv
    with nogil:
        for a in range(n):
            for b in range(c):
                for i in range(kh):
                    for j in range(kw):
                        kv = k[b, i, j]
                        for oy in range(ho):
                            for ox in range(wo):
                                gx[a, b, oy * stride + i, ox * stride + j] = (
                                    gx[a, b, oy * stride + i, ox * stride + j] + gout[a, b, oy, ox] * kv
                                )
    return gx_arr


def dw_grad_kernel(floating[:, :, :, ::1] gout, floating[:, :, :, ::1] x,
                   Py_ssize_t kh, Py_ssize_t kw, int stride):
    cdef Py_ssize_t n = gout.shape[0], c = gout.shape[1], ho = gout.shape[2], wo = gout.shape[3]
    dtype = np.float32 if floating is float else np.float64
    gk_arr = np.zeros((c, kh, kw), dtype=dtype)
    cdef floating[:, :, ::1] gk = gk_arr
    cdef Py_ssize_t a, b, i, j, oy, ox
    cdef double acc
    with nogil:
        for b in range(c):
            for i in range(kh):
                for j in range(kw):
                    acc = 0
                    for a in range(n):
                        for oy in range(ho):
                            for ox in range(wo):
                                acc = acc + gout[a, b, oy, ox] * x[a, b, oy * stride + i, ox * stride + j]
                    gk[b, i, j] = <floating>acc
    return gk_arr


def chebyshev_overlap_count(long long[:, ::1] test, long long[:, ::1] train, long long dist):
    """Number of ``test`` points within Chebyshev distance ``dist`` of any ``train`` point."""
    cdef Py_ssize_t nt = test.shape[0], nr = train.shape[0], i, j
    cdef long long dy, dx, count = 0
    with nogil:
        for i in range(nt):
            for j in range(nr):
                dy = test[i, 0] - train[j, 0]
                dx = test[i, 1] - train[j, 1]
                if dy < 0:
                    dy = -dy
                if dx < 0:
                    dx = -dx
                if dy <= dist and dx <= dist:
                    count += 1
                    break
    return count
