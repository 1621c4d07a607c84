"""Pure-Python twins of the compiled kernels in ``_ckernels.pyx``.

Same signatures, same uniform consumption order. Used when the extension
is not built or when ``MTDLNM_PURE_PYTHON=1`` is set.
"""

import math

import numpy as np
from scipy.special import log_ndtr, ndtr, ndtri

TRUNC = 0.64
TAIL_SWITCH = 37.0
TINY_U = 2.0**-53
LOG_SWITCH = 1e-12


def _tn_lower(a, v):
    if a < TAIL_SWITCH:
        z = -float(ndtri(v * float(ndtr(-a))))
        return a if z < a else z
    return math.sqrt(a * a - 2.0 * math.log(v))


def tn_lower(a, u):
    """Draw from a standard normal truncated to ``[a, inf)`` using one uniform."""
    return _tn_lower(a, 1.0 - u)


def ghk_log_orthant(mean, chol, unif):
    """Log of P(mean + chol @ e >= 0) by GHK with antithetic pairs."""
    mean = np.asarray(mean, dtype=float)
    chol = np.asarray(chol, dtype=float)
    unif = np.asarray(unif, dtype=float)
    q = mean.shape[0]
    if q == 0:
        return 0.0
    half = unif.shape[1]
    # vectorised over the 2*half paths; identical arithmetic per path
    u = np.concatenate([1.0 - unif, np.maximum(unif, TINY_U)], axis=1)
    e = np.empty((q, 2 * half))
    logw = np.zeros(2 * half)
    for i in range(q):
        s = mean[i] + chol[i, :i] @ e[:i] if i else np.full(2 * half, mean[i])
        a = -s / chol[i, i]
        pa = ndtr(-a)
        big = pa > LOG_SWITCH
        logw[big] += np.log(pa[big])
        logw[~big] += log_ndtr(-a[~big])
        if i == q - 1:
            break
        body = a < TAIL_SWITCH
        z = np.empty_like(a)
        z[body] = -ndtri(u[i, body] * pa[body])
        z[body] = np.where(z[body] > a[body], z[body], a[body])
        tail = ~body
        z[tail] = np.sqrt(a[tail] ** 2 - 2.0 * np.log(u[i, tail]))
        e[i] = z
    # interleave to match the compiled accumulation order
    order = np.empty(2 * half, dtype=np.int64)
    order[0::2] = np.arange(half)
    order[1::2] = np.arange(half) + half
    logw = logw[order]
    mx = logw.max()
    return float(mx + math.log(np.exp(logw - mx).sum() / (2 * half)))


def tmvn_gibbs(mean, prec, x0, unif):
    """Coordinate Gibbs sweeps for N(mean, prec^-1) restricted to x >= 0."""
    mean = np.asarray(mean, dtype=float)
    prec = np.asarray(prec, dtype=float)
    unif = np.asarray(unif, dtype=float)
    q = mean.shape[0]
    x = np.maximum(np.asarray(x0, dtype=float), 0.0).copy()
    for s in range(unif.shape[0]):
        for i in range(q):
            c = 0.0
            for j in range(q):
                if j != i:
                    c += prec[i, j] * (x[j] - mean[j])
            m = mean[i] - c / prec[i, i]
            sd = 1.0 / math.sqrt(prec[i, i])
            x[i] = max(m + sd * _tn_lower(-m / sd, 1.0 - unif[s, i]), 0.0)
    return x


# ---------------------------------------------------------------- Polya-gamma

def _expo(rng):
    return -math.log1p(-rng.random())


def _norm(rng):
    u = rng.random()
    return float(ndtri(max(u, TINY_U)))


def _a_coef(n, x):
    k = (n + 0.5) * math.pi
    if x > TRUNC:
        return k * math.exp(-0.5 * k * k * x)
    return math.exp(-1.5 * (math.log(0.5 * math.pi) + math.log(x)) + math.log(k)
                    - 2.0 * (n + 0.5) ** 2 / x)


def _pigauss(x, z):
    rx = math.sqrt(1.0 / x)
    b = rx * (x * z - 1.0)
    a = -rx * (x * z + 1.0)
    return float(ndtr(b)) + math.exp(2.0 * z + float(log_ndtr(a)))


def _rtigauss(z, rng):
    x = TRUNC + 1.0
    if z * TRUNC < 1.0:
        alpha = 0.0
        while rng.random() > alpha:
            e1 = _expo(rng)
            e2 = _expo(rng)
            while e1 * e1 > 2.0 * e2 / TRUNC:
                e1 = _expo(rng)
                e2 = _expo(rng)
            x = TRUNC / ((1.0 + TRUNC * e1) * (1.0 + TRUNC * e1))
            alpha = math.exp(-0.5 * z * z * x)
    else:
        mu = 1.0 / z
        while x > TRUNC:
            y = _norm(rng) ** 2
            x = mu + 0.5 * mu * mu * y - 0.5 * mu * math.sqrt(4.0 * mu * y + (mu * y) ** 2)
            if rng.random() > mu / (mu + x):
                x = mu * mu / x
    return x


def _pg1(z, rng):
    z = abs(z) * 0.5
    fz = 0.125 * math.pi**2 + 0.5 * z * z
    p = 0.5 * math.pi * math.exp(-fz * TRUNC) / fz
    q = 2.0 * math.exp(-z) * _pigauss(TRUNC, z)
    while True:
        if rng.random() < p / (p + q):
            x = TRUNC + _expo(rng) / fz
        else:
            x = _rtigauss(z, rng)
        s = _a_coef(0, x)
        y = rng.random() * s
        n = 0
        while True:
            n += 1
            if n % 2 == 1:
                s -= _a_coef(n, x)
                if y <= s:
                    return 0.25 * x
            else:
                s += _a_coef(n, x)
                if y > s:
                    break


def pg_sum_draws(b, z, generator):
    """PG(b_i, z_i) as sums of b_i exact PG(1, z_i) draws."""
    out = np.empty(len(z))
    for i, (bi, zi) in enumerate(zip(b, z)):
        out[i] = sum(_pg1(float(zi), generator) for _ in range(int(bi)))
    return out
