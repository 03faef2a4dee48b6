# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the kernels in ``_npkernels``.

Same signatures and shapes; results agree with the NumPy path to rounding.
"""
import numpy as np
from libc.math cimport sqrt


def group_shrink(double[::1] v, const long long[::1] starts, const long long[::1] stops,
                 const double[::1] weights, double scale):
    cdef Py_ssize_t g, i, a, b
    cdef double norm, thr, f
    with nogil:
        for g in range(starts.shape[0]):
            a = starts[g]
            b = stops[g]
            norm = 0.0
            for i in range(a, b):
                norm = norm + v[i] * v[i]
            norm = sqrt(norm)
            thr = scale * weights[g]
            if norm <= thr:
                for i in range(a, b):
                    v[i] = 0.0
            else:
                f = 1.0 - thr / norm
                for i in range(a, b):
                    v[i] = v[i] * f


def conv3x3_forward(x, weight, bias):
    x = np.ascontiguousarray(x, dtype=np.float64)
    # channels-last copies keep the innermost loop (output channels) contiguous
    wt = np.ascontiguousarray(np.transpose(weight, (1, 2, 3, 0)), dtype=np.float64)
    bias = np.ascontiguousarray(bias, dtype=np.float64)
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t O = wt.shape[3]
    out = np.empty((B, H, W, O), dtype=np.float64)
    cdef double[:, :, :, ::1] xv = x
    cdef double[:, :, :, ::1] wv = wt
    cdef double[::1] bv = bias
    cdef double[:, :, :, ::1] ov = out
    cdef Py_ssize_t b, o, c, ky, kx, y, xx, sy, sx
    cdef double xval
    cdef double* orow
    cdef const double* wrow
    with nogil:
        for b in range(B):
            for y in range(H):
                for xx in range(W):
                    orow = &ov[b, y, xx, 0]
                    for o in range(O):
                        orow[o] = bv[o]
                    for c in range(C):
                        for ky in range(3):
                            sy = y + ky - 1
                            if sy < 0 or sy >= H:
                                continue
                            for kx in range(3):
                                sx = xx + kx - 1
                                if sx < 0 or sx >= W:
                                    continue
                                xval = xv[b, c, sy, sx]
                                wrow = &wv[c, ky, kx, 0]
                                for o in range(O):
                                    orow[o] += wrow[o] * xval
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv3x3_backward(x, weight, dout):
    x = np.ascontiguousarray(x, dtype=np.float64)
    wt = np.ascontiguousarray(np.transpose(weight, (1, 2, 3, 0)), dtype=np.float64)
    gt = np.ascontiguousarray(np.transpose(dout, (0, 2, 3, 1)), dtype=np.float64)
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t O = wt.shape[3]
    dx = np.zeros((B, C, H, W), dtype=np.float64)
    dwt = np.zeros((C, 3, 3, O), dtype=np.float64)
    db = np.zeros(O, dtype=np.float64)
    cdef double[:, :, :, ::1] xv = x
    cdef double[:, :, :, ::1] wv = wt
    cdef double[:, :, :, ::1] gv = gt
    cdef double[:, :, :, ::1] dxv = dx
    cdef double[:, :, :, ::1] dwv = dwt
    cdef double[::1] dbv = db
    cdef Py_ssize_t b, o, c, ky, kx, y, xx, sy, sx
    cdef double xval, acc
    cdef const double* grow
    cdef const double* wrow
    cdef double* dwrow
    with nogil:
        for b in range(B):
            for y in range(H):
                for xx in range(W):
                    grow = &gv[b, y, xx, 0]
                    for o in range(O):
                        dbv[o] += grow[o]
                    for c in range(C):
                        for ky in range(3):
                            sy = y + ky - 1
                            if sy < 0 or sy >= H:
                                continue
                            for kx in range(3):
                                sx = xx + kx - 1
                                if sx < 0 or sx >= W:
                                    continue
                                xval = xv[b, c, sy, sx]
                                wrow = &wv[c, ky, kx, 0]
                                dwrow = &dwv[c, ky, kx, 0]
                                acc = 0.0
                                for o in range(O):
                                    acc = acc + grow[o] * wrow[o]
                                    dwrow[o] += grow[o] * xval
                                dxv[b, c, sy, sx] += acc
    return dx, np.ascontiguousarray(dwt.transpose(3, 0, 1, 2)), db


def maxpool2_forward(x):
    x = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t H2 = H // 2, W2 = W // 2
    out = np.empty((B, C, H2, W2), dtype=np.float64)
    idx = np.empty((B, C, H2, W2), dtype=np.int8)
    cdef double[:, :, :, ::1] xv = x
    cdef double[:, :, :, ::1] ov = out
    cdef signed char[:, :, :, ::1] iv = idx
    cdef Py_ssize_t b, c, y, xx, k
    cdef double best, val
    cdef signed char arg
    with nogil:
        for b in range(B):
            for c in range(C):
                for y in range(H2):
                    for xx in range(W2):
                        best = xv[b, c, 2 * y, 2 * xx]
                        arg = 0
                        for k in range(1, 4):
                            val = xv[b, c, 2 * y + k // 2, 2 * xx + k % 2]
                            if val > best:
                                best = val
                                arg = <signed char>k
                        ov[b, c, y, xx] = best
                        iv[b, c, y, xx] = arg
    return out, idx


def maxpool2_backward(dout, idx, shape):
    dout = np.ascontiguousarray(dout, dtype=np.float64)
    idx = np.ascontiguousarray(idx, dtype=np.int8)
    B, C, H, W = shape
    dx = np.zeros((B, C, H, W), dtype=np.float64)
    cdef double[:, :, :, ::1] gv = dout
    cdef signed char[:, :, :, ::1] iv = idx
    cdef double[:, :, :, ::1] dxv = dx
    cdef Py_ssize_t b, c, y, xx, k
    cdef Py_ssize_t nb = gv.shape[0], nc = gv.shape[1], h2 = gv.shape[2], w2 = gv.shape[3]
    with nogil:
        for b in range(nb):
            for c in range(nc):
                for y in range(h2):
                    for xx in range(w2):
                        k = iv[b, c, y, xx]
                        dxv[b, c, 2 * y + k // 2, 2 * xx + k % 2] = gv[b, c, y, xx]
    return dx
