# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled int8 inference kernels.

Same contract as ``_kernels_py``; results are bit-identical. Accumulation is
in int32 (the network rejects layers whose accumulator could leave that range) and the
requantization multiply is a single IEEE double product, so the build must
not enable fast-math or FMA contraction.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport trunc

cnp.import_array()

BACKEND = "cython"

ctypedef signed char i8
ctypedef unsigned char u8


cdef inline double _rha(double y) noexcept nogil:
    cdef double t = trunc(y)
    cdef double f = y - t
    if f >= 0.5:
        t += 1.0
    elif f <= -0.5:
        t -= 1.0
    return t


cdef inline int _rha_small(double y) noexcept nogil:
    # y is pre-clamped to +-1024, so the int cast truncates exactly
    cdef int t = <int>y
    cdef double f = y - t
    return t + <int>(f >= 0.5) - <int>(f <= -0.5)  # branch-free: data-dependent branches mispredict


cdef inline i8 _requant(long long acc, double mult, u8 mode) noexcept nogil:
    cdef double y = <double>acc * mult
    cdef int lo = -128, hi = 127, r
    if mode == 1:
        y = y * 0.5
        lo, hi = -64, 63
    elif mode == 2:
        lo, hi = -64, 63
    # clamping first cannot change the result: the output range is far narrower
    y = y if y < 1024.0 else 1024.0
    y = y if y > -1024.0 else -1024.0
    r = _rha_small(y)
    r = r if r > lo else lo
    r = r if r < hi else hi
    return <i8>(r << (mode == 1))


def round_half_away(y):
    cdef cnp.ndarray[double, ndim=1] flat = np.ascontiguousarray(y, dtype=np.float64).ravel()
    cdef Py_ssize_t i, n = flat.shape[0]
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    for i in range(n):
        o[i] = _rha(flat[i])
    return out.reshape(np.shape(y))


def requantize(acc, double multiplier, modes=None):
    a = np.ascontiguousarray(acc, dtype=np.int64)
    shape = a.shape
    cdef Py_ssize_t b_n = shape[0], c_n = shape[1]
    cdef Py_ssize_t s_n = a.size // (b_n * c_n) if b_n * c_n else 0
    cdef const long long[:, :, ::1] av = a.reshape(b_n, c_n, s_n)
    m = np.zeros(c_n, np.uint8) if modes is None else np.ascontiguousarray(modes, dtype=np.uint8)
    cdef const u8[::1] mv = m
    out = np.empty((b_n, c_n, s_n), dtype=np.int8)
    cdef i8[:, :, ::1] ov = out
    cdef Py_ssize_t b, c, s
    with nogil:
        for b in range(b_n):
            for c in range(c_n):
                for s in range(s_n):
                    ov[b, c, s] = _requant(av[b, c, s], multiplier, mv[c])
    return out.reshape(shape)


cdef inline int _dot(const short* x, const short* w, Py_ssize_t n) noexcept nogil:
    # int16 operands let the compiler use multiply-add (pmaddwd) on plain SSE2
    cdef int acc = 0
    cdef Py_ssize_t k
    for k in range(n):
        acc += <int>x[k] * <int>w[k]
    return acc


def dense(x, weight, bias, double multiplier, modes):
    cdef const short[:, ::1] xv = np.ascontiguousarray(x, dtype=np.int8).astype(np.int16)
    cdef const short[:, ::1] wv = np.ascontiguousarray(weight, dtype=np.int8).astype(np.int16)
    cdef const int[::1] bv = np.ascontiguousarray(bias, dtype=np.int32)
    cdef const u8[::1] mv = np.ascontiguousarray(modes, dtype=np.uint8)
    cdef Py_ssize_t b_n = xv.shape[0], k_n = xv.shape[1], n_n = wv.shape[0]
    if wv.shape[1] != k_n:
        raise ValueError("dense: input width does not match weight")
    out = np.empty((b_n, n_n), dtype=np.int8)
    cdef i8[:, ::1] ov = out
    cdef Py_ssize_t b, n
    if b_n == 0 or n_n == 0:
        return out
    with nogil:
        for b in range(b_n):
            for n in range(n_n):
                ov[b, n] = _requant(bv[n] + _dot(&xv[b, 0], &wv[n, 0], k_n) if k_n else bv[n],
                                    multiplier, mv[n])
    return out


def conv2d(x, weight, bias, double multiplier, modes, int stride, int padding):
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cdef const i8[:, :, :, ::1] xv = np.ascontiguousarray(x, dtype=np.int8)
    cdef const i8[:, :, :, ::1] wv = np.ascontiguousarray(weight, dtype=np.int8)
    cdef const int[::1] bv = np.ascontiguousarray(bias, dtype=np.int32)
    cdef const u8[::1] mv = np.ascontiguousarray(modes, dtype=np.uint8)
    cdef Py_ssize_t b_n = xv.shape[0], c_n = xv.shape[1], h_n = xv.shape[2], w_n = xv.shape[3]
    cdef Py_ssize_t o_n = wv.shape[0], kh = wv.shape[2], kw = wv.shape[3]
    if wv.shape[1] != c_n:
        raise ValueError("conv2d: input channels do not match weight")
    cdef Py_ssize_t oh = (h_n - kh) // stride + 1
    cdef Py_ssize_t ow = (w_n - kw) // stride + 1
    out = np.empty((b_n, o_n, oh, ow), dtype=np.int8)
    if out.size == 0:
        return out
    acc_buf = np.empty(oh * ow, dtype=np.int32)
    cdef int[::1] acc = acc_buf
    cdef i8[:, :, :, ::1] ov = out
    cdef Py_ssize_t b, o, r, q, c, i, j
    cdef int wt
    cdef const i8* row
    cdef int* arow
    with nogil:
        for b in range(b_n):
            for o in range(o_n):
                for r in range(oh * ow):
                    acc[r] = bv[o]
                for c in range(c_n):
                    for i in range(kh):
                        for j in range(kw):
                            wt = wv[o, c, i, j]
                            for r in range(oh):
                                row = &xv[b, c, r * stride + i, j]
                                arow = &acc[r * ow]
                                if stride == 1:
                                    for q in range(ow):
                                        arow[q] += wt * <int>row[q]
                                else:
                                    for q in range(ow):
                                        arow[q] += wt * <int>row[q * stride]
                for r in range(oh):
                    for q in range(ow):
                        ov[b, o, r, q] = _requant(acc[r * ow + q], multiplier, mv[o])
    return out


def maxpool2d(x, int window, int stride):
    cdef const i8[:, :, :, ::1] xv = np.ascontiguousarray(x, dtype=np.int8)
    cdef Py_ssize_t b_n = xv.shape[0], c_n = xv.shape[1], h_n = xv.shape[2], w_n = xv.shape[3]
    cdef Py_ssize_t oh = (h_n - window) // stride + 1
    cdef Py_ssize_t ow = (w_n - window) // stride + 1
    out = np.empty((b_n, c_n, oh, ow), dtype=np.int8)
    cdef i8[:, :, :, ::1] ov = out
    cdef Py_ssize_t b, c, r, q, i, j
    cdef i8 best, v
    with nogil:
        for b in range(b_n):
            for c in range(c_n):
                for r in range(oh):
                    for q in range(ow):
                        best = xv[b, c, r * stride, q * stride]
                        for i in range(window):
                            for j in range(window):
                                v = xv[b, c, r * stride + i, q * stride + j]
                                if v > best:
                                    best = v
                        ov[b, c, r, q] = best
    return out
