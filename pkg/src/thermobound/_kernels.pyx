# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels. Contracts match ``_kernels_py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport erf, exp, expm1, sqrt
from scipy.special.cython_special cimport erfcx

cnp.import_array()

cdef double SQRT2 = sqrt(2.0)
cdef double INV_SQRT_2PI = 0.3989422804014327


cdef inline int _right_tail(double x, double s, double floor,
                            double* score, double* dscore) nogil:
    cdef double a = x / s
    cdef double b = (x - 1.0) / s
    cdef double delta = 0.5 * (a - b) * (a + b)
    cdef double e = exp(-delta)
    cdef double num = expm1(-delta) * INV_SQRT_2PI
    cdef double den = 0.5 * (erfcx(b / SQRT2) - erfcx(a / SQRT2) * e)
    cdef int clamped = 0
    if den < floor:
        den = floor
        clamped = 1
    cdef double sc = num / (s * den)
    score[0] = sc
    dscore[0] = (b - a * e) * INV_SQRT_2PI / (s * s * den) - sc * sc
    return clamped


cdef inline int _middle(double x, double s, double floor,
                        double* score, double* dscore) nogil:
    cdef double a = x / s
    cdef double b = (x - 1.0) / s
    cdef double pa = exp(-0.5 * a * a) * INV_SQRT_2PI
    cdef double pb = exp(-0.5 * b * b) * INV_SQRT_2PI
    cdef double den = 0.5 * (erf(a / SQRT2) + erf(-b / SQRT2))
    cdef int clamped = 0
    if den < floor:
        den = floor
        clamped = 1
    cdef double sc = (pa - pb) / (s * den)
    score[0] = sc
    dscore[0] = (b * pb - a * pa) / (s * s * den) - sc * sc
    return clamped


def uniform_score_terms(x, double s, double floor=1e-300):
    """Score of Uniform[0,1] convolved with N(0, s^2), and its x-derivative."""
    if not s > 0.0:
        raise ValueError("noise scale must be positive")
    arr = np.ascontiguousarray(x, dtype=np.float64)
    shape = arr.shape
    cdef double[::1] xs = arr.reshape(-1)
    cdef Py_ssize_t n = xs.shape[0]
    out_s = np.empty(n, dtype=np.float64)
    out_d = np.empty(n, dtype=np.float64)
    cdef double[::1] sv = out_s
    cdef double[::1] dv = out_d
    cdef Py_ssize_t i
    cdef long n_clamped = 0
    cdef double xi
    with nogil:
        for i in range(n):
            xi = xs[i]
            if xi >= 1.0:
                n_clamped += _right_tail(xi, s, floor, &sv[i], &dv[i])
            elif xi <= 0.0:
                n_clamped += _right_tail(1.0 - xi, s, floor, &sv[i], &dv[i])
                sv[i] = -sv[i]
            else:
                n_clamped += _middle(xi, s, floor, &sv[i], &dv[i])
    return out_s.reshape(shape), out_d.reshape(shape), int(n_clamped)
