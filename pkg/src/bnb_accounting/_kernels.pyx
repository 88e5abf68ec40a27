# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled row-wise kernels; see `_kernels_py` for the reference semantics."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, expm1, INFINITY, isfinite
from scipy.special.cython_special cimport ndtri

cnp.import_array()

cdef double LOG_HALF = -0.69314718055994530942


cdef inline double _quantile(double s, double sigma) noexcept nogil:
    if s > LOG_HALF:
        return -sigma * ndtri(-expm1(s))
    return sigma * ndtri(exp(s))


def log_sum_exp_rows(a, double scale, log_weights=None):
    cdef const double[:, :] av = np.ascontiguousarray(a, dtype=np.float64)
    cdef Py_ssize_t n = av.shape[0], d = av.shape[1], i, j
    cdef const double[:] lw
    cdef bint has_w = log_weights is not None
    if has_w:
        lw = np.ascontiguousarray(log_weights, dtype=np.float64)
    else:
        lw = np.zeros(1, dtype=np.float64)
    out = np.empty(n, dtype=np.float64)
    cdef double[:] ov = out
    cdef double top, z, acc
    with nogil:
        for i in range(n):
            top = -INFINITY
            for j in range(d):
                z = av[i, j] * scale
                if has_w:
                    z = z + lw[j]
                if z > top:
                    top = z
            if not isfinite(top):
                ov[i] = top
                continue
            acc = 0.0
            for j in range(d):
                z = av[i, j] * scale
                if has_w:
                    z = z + lw[j]
                acc += exp(z - top)
            ov[i] = top + log(acc)
    return out


def quantile_rows(log_u, offsets, double sigma, bint cumulative):
    cdef const double[:, :] uv = np.ascontiguousarray(log_u, dtype=np.float64)
    cdef const double[:] off = np.ascontiguousarray(offsets, dtype=np.float64)
    cdef Py_ssize_t n = uv.shape[0], d = uv.shape[1], i, j
    out = np.empty((n, d), dtype=np.float64)
    cdef double[:, :] ov = out
    cdef double s
    with nogil:
        for i in range(n):
            s = 0.0
            for j in range(d):
                if cumulative:
                    s = s + uv[i, j]
                    ov[i, j] = _quantile(s + off[i], sigma)
                else:
                    ov[i, j] = _quantile(uv[i, j] + off[i], sigma)
    return out


def quantile_log_sum_rows(log_u, offsets, double sigma, double scale,
                          log_weights=None, bint cumulative=False):
    cdef const double[:, :] uv = np.ascontiguousarray(log_u, dtype=np.float64)
    cdef const double[:] off = np.ascontiguousarray(offsets, dtype=np.float64)
    cdef Py_ssize_t n = uv.shape[0], d = uv.shape[1], i, j
    cdef const double[:] lw
    cdef bint has_w = log_weights is not None
    if has_w:
        lw = np.ascontiguousarray(log_weights, dtype=np.float64)
    else:
        lw = np.zeros(1, dtype=np.float64)
    out = np.empty(n, dtype=np.float64)
    cdef double[:] ov = out
    cdef double s, z, top, acc
    with nogil:
        for i in range(n):
            # Streaming log-sum-exp: rescale the accumulator when a new max appears.
            top = -INFINITY
            acc = 0.0
            s = 0.0
            for j in range(d):
                if cumulative:
                    s = s + uv[i, j]
                    z = _quantile(s + off[i], sigma) * scale
                else:
                    z = _quantile(uv[i, j] + off[i], sigma) * scale
                if has_w:
                    z = z + lw[j]
                if z == -INFINITY:
                    continue
                if z > top:
                    acc = acc * exp(top - z) + 1.0
                    top = z
                else:
                    acc += exp(z - top)
            ov[i] = top + log(acc) if acc > 0 else -INFINITY
    return out
