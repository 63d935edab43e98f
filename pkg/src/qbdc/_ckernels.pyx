# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled convolution and pooling kernels.

Same contracts (and summation order) as ``qbdc._kernels_py``.
"""
import numpy as np
cimport numpy as cnp
from cython cimport floating

cnp.import_array()


def im2col(floating[:, :, :, ::1] x, Py_ssize_t kh, Py_ssize_t kw):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = h - kh + 1, ow = w - kw + 1
    cdef Py_ssize_t b, ch, i, j, y, z, row, col
    dtype = np.float32 if floating is float else np.float64
    out = np.empty((n * oh * ow, c * kh * kw), dtype=dtype)
    cdef floating[:, ::1] cols = out
    with nogil:
        for b in range(n):
            for y in range(oh):
                for z in range(ow):
                    row = (b * oh + y) * ow + z
                    col = 0
                    for ch in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                cols[row, col] = x[b, ch, y + i, z + j]
                                col = col + 1
    return out


def col2im(floating[:, ::1] cols, shape, Py_ssize_t kh, Py_ssize_t kw):
    cdef Py_ssize_t n = shape[0], c = shape[1], h = shape[2], w = shape[3]
    cdef Py_ssize_t oh = h - kh + 1, ow = w - kw + 1
    cdef Py_ssize_t b, ch, i, j, y, z
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((n, c, h, w), dtype=dtype)
    cdef floating[:, :, :, ::1] dx = out
    # (i, j) outermost per image so each pixel accumulates in im2col offset order
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        for y in range(oh):
                            for z in range(ow):
                                dx[b, ch, y + i, z + j] += cols[(b * oh + y) * ow + z,
                                                                (ch * kh + i) * kw + j]
    return out


def maxpool_forward(floating[:, :, :, ::1] x, Py_ssize_t size):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1]
    cdef Py_ssize_t oh = x.shape[2] // size, ow = x.shape[3] // size
    cdef Py_ssize_t b, ch, y, z, i, j, best
    cdef floating v, m
    dtype = np.float32 if floating is float else np.float64
    out = np.empty((n, c, oh, ow), dtype=dtype)
    arg = np.empty((n, c, oh, ow), dtype=np.intp)
    cdef floating[:, :, :, ::1] o = out
    cdef Py_ssize_t[:, :, :, ::1] a = arg
    with nogil:
        for b in range(n):
            for ch in range(c):
                for y in range(oh):
                    for z in range(ow):
                        m = x[b, ch, y * size, z * size]
                        best = 0
                        for i in range(size):
                            for j in range(size):
                                v = x[b, ch, y * size + i, z * size + j]
                                if v > m:
                                    m = v
                                    best = i * size + j
                        o[b, ch, y, z] = m
                        a[b, ch, y, z] = best
    return out, arg


def maxpool_backward(floating[:, :, :, ::1] dout, Py_ssize_t[:, :, :, ::1] arg,
                     shape, Py_ssize_t size):
    cdef Py_ssize_t n = dout.shape[0], c = dout.shape[1], oh = dout.shape[2], ow = dout.shape[3]
    cdef Py_ssize_t b, ch, y, z, k
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros(tuple(shape), dtype=dtype)
    cdef floating[:, :, :, ::1] dx = out
    with nogil:
        for b in range(n):
            for ch in range(c):
                for y in range(oh):
                    for z in range(ow):
                        k = arg[b, ch, y, z]
                        dx[b, ch, y * size + k // size, z * size + k % size] = dout[b, ch, y, z]
    return out
