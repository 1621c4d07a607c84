# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled sampling kernels.

Every routine here has a line-for-line twin in :mod:`mtdlnm._pykernels`;
both consume the same uniforms in the same order so the two backends
produce identical draws (up to libm rounding).
"""

import numpy as np
cimport numpy as cnp

from cpython.pycapsule cimport PyCapsule_GetPointer, PyCapsule_IsValid
from libc.math cimport exp, log, log1p, sqrt, fabs, M_PI
from numpy.random cimport bitgen_t
from scipy.special.cython_special cimport ndtr, ndtri, log_ndtr

cnp.import_array()

cdef double TRUNC = 0.64
cdef double TAIL_SWITCH = 37.0
cdef double TINY_U = 1.1102230246251565e-16  # 2**-53
# below this tail mass, log(ndtr) loses relative accuracy; use log_ndtr
cdef double LOG_SWITCH = 1e-12


cdef inline double _tn_lower(double a, double v) noexcept nogil:
    # Z ~ N(0, 1) | Z >= a, with v in (0, 1] the upper-tail fraction.
    cdef double z
    if a < TAIL_SWITCH:
        z = -ndtri(v * ndtr(-a))
        if z < a:
            z = a
        return z
    return sqrt(a * a - 2.0 * log(v))


def tn_lower(double a, double u):
    """Draw from a standard normal truncated to ``[a, inf)`` using one uniform."""
    return _tn_lower(a, 1.0 - u)


def ghk_log_orthant(const double[::1] mean, const double[:, ::1] chol,
                    const double[:, ::1] unif):
    """Log of P(mean + chol @ e >= 0) by GHK with antithetic pairs.

    ``unif`` has shape ``(q, half)``; each column gives one antithetic pair.
    """
    cdef Py_ssize_t q = mean.shape[0]
    cdef Py_ssize_t half = unif.shape[1]
    cdef Py_ssize_t r, i, j, k
    cdef int anti
    cdef double s, a, lw, v, u, mx, acc, pa, z
    if q == 0:
        return 0.0
    cdef double[::1] e = np.empty(q)
    cdef double[::1] logw = np.empty(2 * half)
    with nogil:
        k = 0
        for r in range(half):
            for anti in range(2):
                lw = 0.0
                for i in range(q):
                    s = mean[i]
                    for j in range(i):
                        s = s + chol[i, j] * e[j]
                    a = -s / chol[i, i]
                    pa = ndtr(-a)
                    if pa > LOG_SWITCH:
                        lw = lw + log(pa)
                    else:
                        lw = lw + log_ndtr(-a)
                    if i == q - 1:
                        break
                    u = unif[i, r]
                    if anti == 0:
                        v = 1.0 - u
                    else:
                        v = u
                        if v < TINY_U:
                            v = TINY_U
                    if a < TAIL_SWITCH:
                        z = -ndtri(v * pa)
                        e[i] = z if z > a else a
                    else:
                        e[i] = sqrt(a * a - 2.0 * log(v))
                logw[k] = lw
                k = k + 1
        mx = logw[0]
        for k in range(1, 2 * half):
            if logw[k] > mx:
                mx = logw[k]
        acc = 0.0
        for k in range(2 * half):
            acc = acc + exp(logw[k] - mx)
    return mx + log(acc / (2 * half))


def tmvn_gibbs(const double[::1] mean, const double[:, ::1] prec,
               const double[::1] x0, const double[:, ::1] unif):
    """Coordinate Gibbs sweeps for N(mean, prec^-1) restricted to x >= 0.

    ``unif`` has shape ``(sweeps, q)``. Returns the state after the last sweep.
    """
    cdef Py_ssize_t q = mean.shape[0]
    cdef Py_ssize_t sweeps = unif.shape[0]
    cdef Py_ssize_t s, i, j
    cdef double c, m, sd
    out = np.empty(q)
    cdef double[::1] x = out
    for i in range(q):
        x[i] = x0[i] if x0[i] > 0.0 else 0.0
    with nogil:
        for s in range(sweeps):
            for i in range(q):
                c = 0.0
                for j in range(q):
                    if j != i:
                        c = c + prec[i, j] * (x[j] - mean[j])
                m = mean[i] - c / prec[i, i]
                sd = 1.0 / sqrt(prec[i, i])
                x[i] = m + sd * _tn_lower(-m / sd, 1.0 - unif[s, i])
                if x[i] < 0.0:
                    x[i] = 0.0
    return out


# ---------------------------------------------------------------- Polya-gamma

cdef inline double _unif(bitgen_t *bg) noexcept nogil:
    return bg.next_double(bg.state)


cdef inline double _expo(bitgen_t *bg) noexcept nogil:
    return -log1p(-_unif(bg))


cdef inline double _norm(bitgen_t *bg) noexcept nogil:
    cdef double u = _unif(bg)
    if u < TINY_U:
        u = TINY_U
    return ndtri(u)


cdef inline double _a_coef(int n, double x) noexcept nogil:
    cdef double k = (n + 0.5) * M_PI
    if x > TRUNC:
        return k * exp(-0.5 * k * k * x)
    return exp(-1.5 * (log(0.5 * M_PI) + log(x)) + log(k)
               - 2.0 * (n + 0.5) * (n + 0.5) / x)


cdef inline double _pigauss(double x, double z) noexcept nogil:
    # CDF at x of inverse-Gaussian(mean 1/z, shape 1); z = 0 is the Levy limit
    cdef double rx = sqrt(1.0 / x)
    cdef double b = rx * (x * z - 1.0)
    cdef double a = -rx * (x * z + 1.0)
    return ndtr(b) + exp(2.0 * z + log_ndtr(a))


cdef double _rtigauss(double z, bitgen_t *bg) noexcept nogil:
    cdef double x = TRUNC + 1.0
    cdef double alpha, e1, e2, y, mu
    if z * TRUNC < 1.0:
        alpha = 0.0
        while _unif(bg) > alpha:
            e1 = _expo(bg)
            e2 = _expo(bg)
            while e1 * e1 > 2.0 * e2 / TRUNC:
                e1 = _expo(bg)
                e2 = _expo(bg)
            x = TRUNC / ((1.0 + TRUNC * e1) * (1.0 + TRUNC * e1))
            alpha = exp(-0.5 * z * z * x)
    else:
        mu = 1.0 / z
        while x > TRUNC:
            y = _norm(bg)
            y = y * y
            x = mu + 0.5 * mu * mu * y - 0.5 * mu * sqrt(4.0 * mu * y + (mu * y) * (mu * y))
            if _unif(bg) > mu / (mu + x):
                x = mu * mu / x
    return x


cdef double _pg1(double z, bitgen_t *bg) noexcept nogil:
    cdef double fz, p, qq, x, s, y
    cdef int n
    z = fabs(z) * 0.5
    fz = 0.125 * M_PI * M_PI + 0.5 * z * z
    p = 0.5 * M_PI * exp(-fz * TRUNC) / fz
    qq = 2.0 * exp(-z) * _pigauss(TRUNC, z)
    while True:
        if _unif(bg) < p / (p + qq):
            x = TRUNC + _expo(bg) / fz
        else:
            x = _rtigauss(z, bg)
        s = _a_coef(0, x)
        y = _unif(bg) * s
        n = 0
        while True:
            n = n + 1
            if n % 2 == 1:
                s = s - _a_coef(n, x)
                if y <= s:
                    return 0.25 * x
            else:
                s = s + _a_coef(n, x)
                if y > s:
                    break


def pg_sum_draws(const long[::1] b, const double[::1] z, object generator):
    """PG(b_i, z_i) as sums of b_i exact PG(1, z_i) draws."""
    cdef Py_ssize_t n = z.shape[0]
    cdef Py_ssize_t i
    cdef long k
    cdef double acc
    capsule = generator.bit_generator.capsule
    if not PyCapsule_IsValid(capsule, "BitGenerator"):
        raise ValueError("invalid bit generator capsule")
    cdef bitgen_t *bg = <bitgen_t *> PyCapsule_GetPointer(capsule, "BitGenerator")
    out = np.empty(n)
    cdef double[::1] res = out
    with generator.bit_generator.lock, nogil:
        for i in range(n):
            acc = 0.0
            for k in range(b[i]):
                acc = acc + _pg1(z[i], bg)
            res[i] = acc
    return out
