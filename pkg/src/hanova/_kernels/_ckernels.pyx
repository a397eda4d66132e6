# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled backfitting kernels.

Each routine fuses what the numpy fallback does with temporaries into a
single pass over the observed cells.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport fabs

cnp.import_array()


def margin_sum(const cnp.int64_t[::1] key, const double[::1] values, Py_ssize_t size):
    cdef Py_ssize_t i, n = key.shape[0]
    out = np.zeros(size, dtype=np.float64)
    cdef double[::1] o = out
    with nogil:
        for i in range(n):
            o[key[i]] += values[i]
    return out


def block_update(const cnp.int64_t[::1] key, const double[::1] w,
                 const double[::1] u, const double[::1] z,
                 double[::1] beta, double[::1] mu):
    cdef Py_ssize_t i, j, n = key.shape[0], p = beta.shape[0]
    cdef double d, dmax = 0.0
    s_arr = np.zeros(p, dtype=np.float64)
    cdef double[::1] s = s_arr
    with nogil:
        for i in range(n):
            s[key[i]] += w[i] * mu[i]
        for j in range(p):
            if z[j] > 0:
                d = (u[j] - s[j]) / z[j]
            else:
                d = 0.0
            s[j] = d
            beta[j] += d
            if fabs(d) > dmax:
                dmax = fabs(d)
        for i in range(n):
            mu[i] += s[key[i]]
    return dmax


def gather_add(double[::1] out, const double[::1] beta, const cnp.int64_t[::1] key):
    cdef Py_ssize_t i, n = key.shape[0]
    with nogil:
        for i in range(n):
            out[i] += beta[key[i]]


def wpls_objective(const double[::1] y, const double[::1] n, const double[::1] mu,
                   const double[::1] prior, double lam):
    cdef Py_ssize_t i, m = y.shape[0]
    cdef double r, d, fit = 0.0, pen = 0.0
    with nogil:
        for i in range(m):
            r = y[i] - mu[i]
            fit += n[i] * r * r
        if lam != 0.0:
            for i in range(m):
                d = mu[i] - prior[i]
                pen += d * d
    return fit + lam * pen
