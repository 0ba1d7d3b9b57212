# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels. See ``_fallback.py`` for the reference semantics."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, log1p, expm1, sqrt, lgamma, INFINITY, isfinite
from scipy.special.cython_special cimport psi

cnp.import_array()

cdef double NLL_CAP = 1e10


cdef inline double _logaddexp(double a, double b) nogil:
    cdef double m
    if a == -INFINITY:
        return b
    if b == -INFINITY:
        return a
    m = a if a > b else b
    return m + log1p(exp(-abs(a - b)))


def zinb_terms(x, mu, theta, log_pi, log_1mpi):
    cdef cnp.ndarray[double, ndim=1] xf = np.ascontiguousarray(x, dtype=np.float64).ravel()
    cdef cnp.ndarray[double, ndim=1] muf = np.ascontiguousarray(mu, dtype=np.float64).ravel()
    cdef cnp.ndarray[double, ndim=1] thf = np.ascontiguousarray(theta, dtype=np.float64).ravel()
    cdef cnp.ndarray[double, ndim=1] lpf = np.ascontiguousarray(log_pi, dtype=np.float64).ravel()
    cdef cnp.ndarray[double, ndim=1] lqf = np.ascontiguousarray(log_1mpi, dtype=np.float64).ravel()
    shape = np.shape(x)
    cdef Py_ssize_t n = xf.shape[0], i
    if muf.shape[0] != n or thf.shape[0] != n or lpf.shape[0] != n or lqf.shape[0] != n:
        raise ValueError("zinb_terms: argument shapes differ")
    nll_a = np.empty(n)
    gmu_a = np.empty(n)
    gth_a = np.empty(n)
    glo_a = np.empty(n)
    cdef double[::1] nll = nll_a, gmu = gmu_a, gth = gth_a, glo = glo_a
    cdef double[::1] xv = xf, mv = muf, tv = thf, pv = lpf, qv = lqf
    cdef double xi, m, t, lp, lq, log_tm, log_ratio, l0, log_z, w, a, val
    with nogil:
        for i in range(n):
            xi = xv[i]; m = mv[i]; t = tv[i]; lp = pv[i]; lq = qv[i]
            log_tm = log(t + m)
            log_ratio = log(t) - log_tm
            l0 = t * log_ratio
            if xi == 0.0:
                log_z = _logaddexp(lp, lq + l0)
                w = exp(lq + l0 - log_z)
                a = exp(lp - log_z)
                val = -log_z
                gmu[i] = w * t / (t + m)
                gth[i] = -w * (log_ratio + m / (t + m))
                glo[i] = exp(lq) * expm1(l0) * a
            else:
                val = (-lq - (lgamma(xi + t) - lgamma(xi + 1.0) - lgamma(t)
                              + l0 + xi * (log(m) - log_tm)))
                gmu[i] = (xi + t) / (t + m) - xi / m
                gth[i] = -(psi(xi + t) - psi(t) + log_ratio + (m - xi) / (t + m))
                glo[i] = exp(lp)
            if not (val < NLL_CAP):
                val = NLL_CAP
                gmu[i] = 0.0
                gth[i] = 0.0
                glo[i] = 0.0
            nll[i] = val
    return (nll_a.reshape(shape), gmu_a.reshape(shape),
            gth_a.reshape(shape), glo_a.reshape(shape))


cdef inline double _log_expm1(double x) nogil:
    if x > 50.0:
        return x + log1p(-exp(-x))
    return log(expm1(x))


def sgm_log_a_minus_one(double q, double sigma, long alpha):
    cdef long k
    cdef double lg_a = lgamma(alpha + 1.0)
    cdef double log_q = log(q)
    cdef double log_1mq = log1p(-q)
    cdef double s2 = 2.0 * sigma * sigma
    cdef double top = -INFINITY, acc = 0.0, t
    terms_a = np.empty(max(alpha - 1, 0))
    cdef double[::1] terms = terms_a
    with nogil:
        for k in range(2, alpha + 1):
            t = lg_a - lgamma(k + 1.0) - lgamma(alpha - k + 1.0) + k * log_q
            if alpha - k != 0:
                t = t + (alpha - k) * log_1mq
            t = t + _log_expm1((<double>k * k - k) / s2)
            terms[k - 2] = t
            if t > top:
                top = t
        if isfinite(top):
            for k in range(alpha - 1):
                acc = acc + exp(terms[k] - top)
    if not isfinite(top):
        return -INFINITY
    return top + log(acc)


def clip_sum(grads, bound):
    cdef double[:, :] g = np.asarray(grads, dtype=np.float64)
    cdef Py_ssize_t m = g.shape[0], p = g.shape[1], i, j
    out_a = np.zeros(p)
    norms_a = np.empty(m)
    cdef double[::1] out = out_a, norms = norms_a
    cdef double c = -1.0 if bound is None else float(bound)
    cdef double s, f, v
    with nogil:
        for i in range(m):
            s = 0.0
            for j in range(p):
                v = g[i, j]
                s = s + v * v
            s = sqrt(s)
            norms[i] = s
            f = 1.0
            if c > 0.0 and s / c > 1.0:
                f = 1.0 / (s / c)
            for j in range(p):
                out[j] = out[j] + f * g[i, j]
    return out_a, norms_a
