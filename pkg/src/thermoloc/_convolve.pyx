# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled 2-D convolution kernels with half-sample symmetric borders."""

import numpy as np

cimport numpy as cnp

cnp.import_array()


cdef inline Py_ssize_t _reflect(Py_ssize_t i, Py_ssize_t n) nogil:
    if i < 0:
        return -i - 1
    if i >= n:
        return 2 * n - i - 1
    return i


def convolve_reflect(double[:, ::1] image, double[:, ::1] kernel):
    cdef Py_ssize_t h = image.shape[0]
    cdef Py_ssize_t w = image.shape[1]
    cdef Py_ssize_t kh = kernel.shape[0]
    cdef Py_ssize_t kw = kernel.shape[1]
    cdef Py_ssize_t ry = kh // 2
    cdef Py_ssize_t rx = kw // 2
    cdef Py_ssize_t y, x, i, j
    cdef double k
    padded = np.empty((h + 2 * ry, w + 2 * rx), dtype=np.float64)
    flipped = np.ascontiguousarray(kernel[::-1, ::-1])
    sums = np.empty(w, dtype=np.float64)
    out = np.empty((h, w), dtype=np.float64)
    cdef double[:, ::1] p = padded
    cdef double[:, ::1] f = flipped
    cdef double[::1] row = sums
    cdef double[:, ::1] o = out
    with nogil:
        for y in range(h + 2 * ry):
            for x in range(w + 2 * rx):
                p[y, x] = image[_reflect(y - ry, h), _reflect(x - rx, w)]
        # correlate with the flipped kernel so the inner loop runs along rows
        for y in range(h):
            for x in range(w):
                row[x] = 0.0
            for i in range(kh):
                for j in range(kw):
                    k = f[i, j]
                    for x in range(w):
                        row[x] = row[x] + k * p[y + i, x + j]
            for x in range(w):
                o[y, x] = row[x]
    return out


def unsharp_reflect(double[:, ::1] image, double[:, ::1] kernel, double amount):
    cdef Py_ssize_t h = image.shape[0]
    cdef Py_ssize_t w = image.shape[1]
    cdef Py_ssize_t y, x
    cdef double v
    blurred = convolve_reflect(image, kernel)
    cdef double[:, ::1] b = blurred
    out = np.empty((h, w), dtype=np.float64)
    cdef double[:, ::1] o = out
    with nogil:
        for y in range(h):
            for x in range(w):
                v = image[y, x] + amount * (image[y, x] - b[y, x])
                if v < 0.0:
                    v = 0.0
                elif v > 255.0:
                    v = 255.0
                o[y, x] = v
    return out
