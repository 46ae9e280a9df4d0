# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled convolution gather/scatter kernels (3x3 window, pad 1, stride 1).

Same layouts as the numpy fallback: activations ``(C, N, H, W)``, columns
``(C * 9, N * H * W)``.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def im2col3x3(x):
    cdef const double[:, :, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t c = xv.shape[0], n = xv.shape[1], h = xv.shape[2], w = xv.shape[3]
    out = np.zeros((c * 9, n * h * w), dtype=np.float64)
    cdef double[:, ::1] ov = out
    cdef Py_ssize_t ch, b, i, j, dy, dx, yy, row, col0, j0, j1
    with nogil:
        for ch in range(c):
            for dy in range(3):
                for dx in range(3):
                    row = ch * 9 + dy * 3 + dx
                    j0 = 1 if dx == 0 else 0
                    j1 = w - 1 if dx == 2 else w
                    for b in range(n):
                        for i in range(h):
                            yy = i + dy - 1
                            if yy < 0 or yy >= h:
                                continue
                            col0 = (b * h + i) * w
                            for j in range(j0, j1):
                                ov[row, col0 + j] = xv[ch, b, yy, j + dx - 1]
    return out


def col2im3x3(cols, Py_ssize_t c, Py_ssize_t n, Py_ssize_t h, Py_ssize_t w):
    cdef const double[:, ::1] cv = np.ascontiguousarray(cols, dtype=np.float64)
    out = np.zeros((c, n, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] ov = out
    cdef Py_ssize_t ch, b, i, j, dy, dx, yy, row, col0, j0, j1
    with nogil:
        for ch in range(c):
            for dy in range(3):
                for dx in range(3):
                    row = ch * 9 + dy * 3 + dx
                    j0 = 1 if dx == 0 else 0
                    j1 = w - 1 if dx == 2 else w
                    for b in range(n):
                        for i in range(h):
                            yy = i + dy - 1
                            if yy < 0 or yy >= h:
                                continue
                            col0 = (b * h + i) * w
                            for j in range(j0, j1):
                                ov[ch, b, yy, j + dx - 1] += cv[row, col0 + j]
    return out
