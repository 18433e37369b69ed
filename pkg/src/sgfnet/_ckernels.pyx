# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels mirroring ``_kernels_py`` (depthwise convolution, last-axis softmax backward)."""

import numpy as np
cimport cython

ctypedef fused real:
    float
    double


cdef inline Py_ssize_t _imax(Py_ssize_t a, Py_ssize_t b) nogil:
    return a if a > b else b


cdef inline Py_ssize_t _imin(Py_ssize_t a, Py_ssize_t b) nogil:
    return a if a < b else b


def _forward(real[:, :, :, ::1] x, real[:, :, ::1] w, Py_ssize_t d, real[:, :, :, ::1] out):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t K = w.shape[1], p = d * (K - 1) // 2
    cdef Py_ssize_t n, c, i, j, h, col, oi, oj, h0, h1, w0, w1
    cdef real wij
    with nogil:
        for n in range(N):
            for c in range(C):
                for i in range(K):
                    oi = i * d - p
                    h0 = _imax(0, -oi)
                    h1 = _imin(H, H - oi)
                    for j in range(K):
                        oj = j * d - p
                        w0 = _imax(0, -oj)
                        w1 = _imin(W, W - oj)
                        wij = w[c, i, j]
                        if wij == 0:
                            continue
                        for h in range(h0, h1):
                            for col in range(w0, w1):
                                out[n, c, h, col] += wij * x[n, c, h + oi, col + oj]


def _backward(real[:, :, :, ::1] x, real[:, :, ::1] w, real[:, :, :, ::1] g, Py_ssize_t d,
              real[:, :, :, ::1] dx, double[:, :, ::1] dw):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t K = w.shape[1], p = d * (K - 1) // 2
    cdef Py_ssize_t n, c, i, j, h, col, oi, oj, h0, h1, w0, w1
    cdef real wij, gv
    cdef double acc
    with nogil:
        for n in range(N):
            for c in range(C):
                for i in range(K):
                    oi = i * d - p
                    h0 = _imax(0, -oi)
                    h1 = _imin(H, H - oi)
                    for j in range(K):
                        oj = j * d - p
                        w0 = _imax(0, -oj)
                        w1 = _imin(W, W - oj)
                        wij = w[c, i, j]
                        acc = 0
                        for h in range(h0, h1):
                            for col in range(w0, w1):
                                gv = g[n, c, h, col]
                                dx[n, c, h + oi, col + oj] += wij * gv
                                acc += gv * x[n, c, h + oi, col + oj]
                        dw[c, i, j] += acc


def dwconv_forward(x, w, dilation):
    x = np.ascontiguousarray(x)
    w = np.ascontiguousarray(w, dtype=x.dtype)
    out = np.zeros_like(x)
    _forward(x, w, dilation, out)
    return out


def dwconv_backward(x, w, g, dilation):
    x = np.ascontiguousarray(x)
    w = np.ascontiguousarray(w, dtype=x.dtype)
    g = np.ascontiguousarray(g, dtype=x.dtype)
    dx = np.zeros_like(x)
    dw = np.zeros(w.shape, dtype=np.float64)
    _backward(x, w, g, dilation, dx, dw)
    return dx, dw.astype(x.dtype)


def _softmax_rows_grad(real[:, ::1] y, real[:, ::1] g, real[:, ::1] out):
    cdef Py_ssize_t R = y.shape[0], L = y.shape[1], r, i
    cdef double s
    with nogil:
        for r in range(R):
            s = 0
            for i in range(L):
                s += g[r, i] * y[r, i]
            for i in range(L):
                out[r, i] = y[r, i] * (g[r, i] - <real>s)


def softmax_lastaxis_grad(y, g):
    # no negative indexing here: wraparound is disabled module-wide
    n = y.shape[y.ndim - 1]
    g = np.ascontiguousarray(g, dtype=y.dtype)
    out = np.empty_like(y)
    _softmax_rows_grad(y.reshape(-1, n), g.reshape(-1, n), out.reshape(-1, n))
    return out
