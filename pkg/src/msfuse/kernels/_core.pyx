# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled conv/pool kernels.

Semantics (padding, output sizing, argmax tie-breaking) must match the
NumPy fallback in ``_fallback.py`` exactly; the test suite compares the
two backends on random inputs.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

BACKEND_NAME = "compiled"


def conv2d_forward(cnp.ndarray x_in, cnp.ndarray w_in, cnp.ndarray b_in,
                   int stride=1, int pad=0):
    cdef cnp.ndarray[double, ndim=4] x = np.ascontiguousarray(x_in, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=4] w = np.ascontiguousarray(w_in, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1] b = np.ascontiguousarray(b_in, dtype=np.float64)
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], wd = x.shape[2], cin = x.shape[3]
    cdef Py_ssize_t kh = w.shape[0], kw = w.shape[1], cout = w.shape[3]
    if w.shape[2] != cin:
        raise ValueError(f"conv2d: input has {cin} channels, filter expects {w.shape[2]}")
    cdef Py_ssize_t ho = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t wo = (wd + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(
            f"conv2d: kernel {kh}x{kw} does not fit padded input {h + 2 * pad}x{wd + 2 * pad}")
    cdef cnp.ndarray[double, ndim=4] y = np.empty((n, ho, wo, cout))
    cdef Py_ssize_t bi, oy, ox, ky, kx, ci, co, iy, ix
    cdef double acc
    for bi in range(n):
        for oy in range(ho):
            for ox in range(wo):
                for co in range(cout):
                    acc = b[co]
                    for ky in range(kh):
                        iy = oy * stride + ky - pad
                        if iy < 0 or iy >= h:
                            continue
                        for kx in range(kw):
                            ix = ox * stride + kx - pad
                            if ix < 0 or ix >= wd:
                                continue
                            for ci in range(cin):
                                acc += x[bi, iy, ix, ci] * w[ky, kx, ci, co]
                    y[bi, oy, ox, co] = acc
    return y


def conv2d_backward(cnp.ndarray x_in, cnp.ndarray w_in, cnp.ndarray dy_in,
                    int stride=1, int pad=0):
    cdef cnp.ndarray[double, ndim=4] x = np.ascontiguousarray(x_in, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=4] w = np.ascontiguousarray(w_in, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=4] dy = np.ascontiguousarray(dy_in, dtype=np.float64)
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], wd = x.shape[2], cin = x.shape[3]
    cdef Py_ssize_t kh = w.shape[0], kw = w.shape[1], cout = w.shape[3]
    cdef Py_ssize_t ho = dy.shape[1], wo = dy.shape[2]
    cdef cnp.ndarray[double, ndim=4] dx = np.zeros((n, h, wd, cin))
    cdef cnp.ndarray[double, ndim=4] dw = np.zeros((kh, kw, cin, cout))
    cdef cnp.ndarray[double, ndim=1] db = np.zeros(cout)
    cdef Py_ssize_t bi, oy, ox, ky, kx, ci, co, iy, ix
    cdef double g
    for bi in range(n):
        for oy in range(ho):
            for ox in range(wo):
                for co in range(cout):
                    g = dy[bi, oy, ox, co]
                    db[co] += g
                    for ky in range(kh):
                        iy = oy * stride + ky - pad
                        if iy < 0 or iy >= h:
                            continue
                        for kx in range(kw):
                            ix = ox * stride + kx - pad
                            if ix < 0 or ix >= wd:
                                continue
                            for ci in range(cin):
                                dw[ky, kx, ci, co] += x[bi, iy, ix, ci] * g
                                dx[bi, iy, ix, ci] += w[ky, kx, ci, co] * g
    return dx, dw, db


def maxpool2x2_forward(cnp.ndarray x_in):
    cdef cnp.ndarray[double, ndim=4] x = np.ascontiguousarray(x_in, dtype=np.float64)
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], w = x.shape[2], c = x.shape[3]
    cdef Py_ssize_t ho = (h + 1) // 2, wo = (w + 1) // 2
    cdef cnp.ndarray[double, ndim=4] y = np.empty((n, ho, wo, c))
    cdef cnp.ndarray[signed char, ndim=4] argmax = np.zeros((n, ho, wo, c), dtype=np.int8)
    cdef Py_ssize_t bi, oy, ox, ci, k, iy, ix
    cdef double best, v
    cdef signed char bestk
    for bi in range(n):
        for oy in range(ho):
            for ox in range(wo):
                for ci in range(c):
                    best = -np.inf
                    bestk = 0
                    for k in range(4):
                        iy = 2 * oy + (k // 2)
                        ix = 2 * ox + (k % 2)
                        if iy >= h or ix >= w:
                            continue
                        v = x[bi, iy, ix, ci]
                        if v > best:
                            best = v
                            bestk = <signed char> k
                    y[bi, oy, ox, ci] = best
                    argmax[bi, oy, ox, ci] = bestk
    return y, argmax


def maxpool2x2_backward(x_shape, cnp.ndarray argmax_in, cnp.ndarray dy_in):
    cdef cnp.ndarray[signed char, ndim=4] argmax = np.ascontiguousarray(argmax_in, dtype=np.int8)
    cdef cnp.ndarray[double, ndim=4] dy = np.ascontiguousarray(dy_in, dtype=np.float64)
    cdef Py_ssize_t n = x_shape[0], h = x_shape[1], w = x_shape[2], c = x_shape[3]
    cdef Py_ssize_t ho = dy.shape[1], wo = dy.shape[2]
    cdef cnp.ndarray[double, ndim=4] dx = np.zeros((n, h, w, c))
    cdef Py_ssize_t bi, oy, ox, ci, k, iy, ix
    for bi in range(n):
        for oy in range(ho):
            for ox in range(wo):
                for ci in range(c):
                    k = argmax[bi, oy, ox, ci]
                    iy = 2 * oy + (k // 2)
                    ix = 2 * ox + (k % 2)
                    dx[bi, iy, ix, ci] += dy[bi, oy, ox, ci]
    return dx
