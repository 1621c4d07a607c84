"""Random-variate kernels used by the Gibbs/MH sampler.

All functions take an explicit :class:`numpy.random.Generator`; none touch
global random state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels

PG_EXACT_MAX = 50


@dataclass(frozen=True)
class RngStream:
    """Seed plus stream id; equal pairs give identical draw sequences."""

    seed: int
    stream: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(int(self.seed), spawn_key=(int(self.stream),))
        return np.random.Generator(np.random.PCG64(ss))


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.PCG64(ss))


def _cholesky(cov: np.ndarray) -> np.ndarray:
    cov = np.asarray(cov, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1] or not np.allclose(cov, cov.T):
        raise np.linalg.LinAlgError("covariance must be a symmetric square matrix")
    return np.linalg.cholesky(cov)


# ------------------------------------------------------- truncated normals

def sample_tmvn_nonneg_prec(mean, prec, rng, sweeps: int = 10, init=None) -> np.ndarray:
    """Nonnegative-orthant MVN draw given the precision matrix."""
    mean = np.ascontiguousarray(mean, dtype=float)
    q = mean.shape[0]
    if q == 0:
        return np.zeros(0)
    x0 = np.maximum(mean, 0.0) if init is None else np.ascontiguousarray(init, dtype=float)
    unif = rng.random((sweeps, q))
    return kernels.tmvn_gibbs(mean, np.ascontiguousarray(prec, dtype=float), x0, unif)


def sample_tmvn_nonneg(mean, cov, rng, sweeps: int = 10, init=None) -> np.ndarray:
    """One draw from MVN(mean, cov) restricted to ``x >= 0``.

    Runs ``sweeps`` coordinate Gibbs sweeps starting from ``init`` (default:
    the positive part of the mean).
    """
    mean = np.asarray(mean, dtype=float)
    if mean.size == 0:
        return np.zeros(0)
    L = _cholesky(cov)
    Linv = np.linalg.inv(L)
    prec = Linv.T @ Linv
    return sample_tmvn_nonneg_prec(mean, prec, rng, sweeps, init)


def ghk_uniforms(q: int, mc_size: int, rng) -> np.ndarray:
    return rng.random((q, max(1, (mc_size + 1) // 2)))


def log_orthant_prob_chol(mean, chol, unif) -> float:
    """GHK estimate of ``log P(X >= 0)`` for ``X = mean + chol @ e``."""
    mean = np.ascontiguousarray(mean, dtype=float)
    if mean.size == 0:
        return 0.0
    return kernels.ghk_log_orthant(mean, np.ascontiguousarray(chol, dtype=float),
                                   np.ascontiguousarray(unif[:mean.size], dtype=float))


def log_orthant_prob(mean, cov, mc_size: int = 512, rng=None) -> float:
    """Log of P(X >= 0) for X ~ MVN(mean, cov) by GHK sequential conditioning.

    Uses ``mc_size`` paths in antithetic pairs. With ``rng=None`` a fixed
    sub-stream is used, so repeated calls are deterministic.
    """
    if mc_size < 1:
        raise ValueError("mc_size must be >= 1")
    mean = np.asarray(mean, dtype=float)
    if mean.size == 0:
        return 0.0
    L = _cholesky(cov)
    if rng is None:
        rng = make_rng(0x6A4B)
    return log_orthant_prob_chol(mean, L, ghk_uniforms(mean.size, mc_size, rng))


# ---------------------------------------------------------- Polya-gamma

def pg_mean(b, z):
    """E[PG(b, z)] = b tanh(z/2) / (2z), with the z -> 0 limit b/4."""
    z = np.abs(np.asarray(z, dtype=float))
    small = z < 1e-4
    zs = np.where(small, 1.0, z)
    return np.asarray(b) * np.where(small, 0.25 - z**2 / 48.0, np.tanh(zs / 2) / (2 * zs))


def pg_var(b, z):
    """Var[PG(b, z)] = b (sinh z - z) / (4 z^3 cosh^2(z/2)), limit b/24."""
    z = np.abs(np.asarray(z, dtype=float))
    small = z < 1e-3
    zs = np.where(small, 1.0, np.minimum(z, 700.0))
    exact = (np.sinh(zs) - zs) / (4 * zs**3 * np.cosh(zs / 2) ** 2)
    return np.asarray(b) * np.where(small, 1 / 24 - z**2 / 120, exact)


def _pg_gamma_series(b, z, rng, trunc=200):
    # truncated sum-of-gammas representation, rescaled to the exact mean
    k = np.arange(trunc) + 0.5
    denom = k**2 + (z[:, None] / (2 * np.pi)) ** 2
    g = rng.gamma(b[:, None] * np.ones((1, trunc)), 1.0)
    draw = (g / denom).sum(axis=1) / (2 * np.pi**2)
    approx_mean = b * (1 / denom).sum(axis=1) / (2 * np.pi**2)
    return draw * pg_mean(b, z) / approx_mean


def sample_polya_gamma(b, z, rng, exact_max: int = PG_EXACT_MAX):
    """Draw PG(b, z); vectorised over broadcast ``b`` and ``z``.

    Integer ``b <= exact_max`` sums ``b`` exact PG(1, z) draws; larger ``b``
    uses a Gaussian with the exact PG mean and variance (floored at a small
    positive value); non-integer ``b <= exact_max`` uses a truncated gamma
    series.
    """
    b_arr, z_arr = np.broadcast_arrays(np.asarray(b, dtype=float), np.asarray(z, dtype=float))
    scalar = b_arr.ndim == 0
    b_flat = np.atleast_1d(b_arr).ravel()
    z_flat = np.atleast_1d(z_arr).ravel()
    if np.any(b_flat <= 0):
        raise ValueError("PG shape parameter b must be positive")
    out = np.empty(b_flat.size)
    integral = b_flat == np.round(b_flat)
    exact = integral & (b_flat <= exact_max)
    if exact.any():
        out[exact] = kernels.pg_sum_draws(
            np.ascontiguousarray(b_flat[exact], dtype=np.int64),
            np.ascontiguousarray(z_flat[exact]), rng)
    big = b_flat > exact_max
    if big.any():
        m = pg_mean(b_flat[big], z_flat[big])
        v = pg_var(b_flat[big], z_flat[big])
        out[big] = np.maximum(m + np.sqrt(v) * rng.standard_normal(big.sum()), 1e-3 * m)
    frac = ~integral & ~big
    if frac.any():
        out[frac] = _pg_gamma_series(b_flat[frac], z_flat[frac], rng)
    if scalar:
        return float(out[0])
    return out.reshape(b_arr.shape)


# ------------------------------------------------------- half-Cauchy scale

def sample_inv_gamma(shape, scale, rng) -> float:
    return float(scale / rng.gamma(shape))


def update_halfcauchy_variance(sum_sq: float, count: int, aux: float, rng) -> tuple[float, float]:
    """One Gibbs pass for a variance with a half-Cauchy(0, 1) prior on its root.

    Uses the auxiliary inverse-gamma representation:
    ``var | aux ~ IG((count+1)/2, 1/aux + sum_sq/2)`` then
    ``aux | var ~ IG(1, 1 + 1/var)``.
    """
    var = sample_inv_gamma((count + 1) / 2.0, 1.0 / aux + sum_sq / 2.0, rng)
    aux = sample_inv_gamma(1.0, 1.0 + 1.0 / var, rng)
    return var, aux


def sample_mvn_prec(mean_num, prec, rng) -> np.ndarray:
    """Draw from N(prec^-1 mean_num, prec^-1) via Cholesky of the precision."""
    L = np.linalg.cholesky(prec)
    mu = np.linalg.solve(L.T, np.linalg.solve(L, mean_num))
    return mu + np.linalg.solve(L.T, rng.standard_normal(mu.size))


def log_normal_cdf(x):
    from scipy.special import log_ndtr
    return log_ndtr(x)


def logsumexp(a) -> float:
    a = np.asarray(a, dtype=float)
    m = a.max()
    return float(m + math.log(np.exp(a - m).sum()))
