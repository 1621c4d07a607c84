"""Posterior summaries of exposure-lag-response draws."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ModelError


@dataclass(frozen=True, eq=False)
class SurfaceSummary:
    """Pointwise posterior mean and credible band on the ``(grid_x, grid_l)`` grid.

    Arrays have shape ``(len(grid_x), len(grid_l))``. ``widen`` records the
    amount added to each side of the band.
    """

    grid_x: np.ndarray
    grid_l: np.ndarray
    mean: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    level: float
    widen: float = 0.0
    one_sided: bool = False

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower


@dataclass(frozen=True, eq=False)
class SusceptibilityProfile:
    probability: np.ndarray
    threshold: float = 0.95

    @property
    def declared(self) -> np.ndarray:
        """Lags whose susceptibility probability reaches the threshold."""
        return np.flatnonzero(self.probability >= self.threshold)


def _stack_surfaces(draws) -> np.ndarray:
    if len(draws) == 0:
        raise ModelError("no posterior draws to summarize")
    return np.stack([d.surface if hasattr(d, "surface") else np.asarray(d) for d in draws])


def summarize_surface(draws, level: float = 0.95, widen: float = 0.0, *,
                      one_sided: bool = False, grid_x=None, grid_l=None) -> SurfaceSummary:
    """Mean and equal-tailed (or upper one-sided) interval at each grid point.

    ``draws`` may be posterior draw objects with a ``surface`` attribute or
    plain 2-d arrays. Quantiles follow the linear-interpolation (type 7)
    convention.
    """
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    if widen < 0:
        raise ValueError("widen must be nonnegative")
    S = _stack_surfaces(draws)
    if S.shape[0] < 2:
        raise ModelError("need at least two draws")
    mean = S.mean(axis=0)
    if one_sided:
        lower = S.min(axis=0)
        upper = np.quantile(S, level, axis=0)
    else:
        tail = (1 - level) / 2
        lower, upper = np.quantile(S, [tail, 1 - tail], axis=0)
    # float rounding in the quantile interpolation can put the mean a hair outside
    lower = np.minimum(lower, mean) - widen
    upper = np.maximum(upper, mean) + widen
    gx = np.arange(mean.shape[0]) if grid_x is None else np.asarray(grid_x)
    gl = np.arange(mean.shape[1]) if grid_l is None else np.asarray(grid_l)
    return SurfaceSummary(gx, gl, mean, lower, upper, level, widen, one_sided)


def susceptibility(draws, threshold: float = 0.95) -> SusceptibilityProfile:
    """Posterior frequency with which some nested tree covering lag ``l`` splits."""
    if len(draws) == 0:
        raise ModelError("no posterior draws to summarize")
    E = np.stack([np.asarray(getattr(d, "effect_lags", d), dtype=float) for d in draws])
    return SusceptibilityProfile(E.mean(axis=0), threshold)


def gelman_rubin(chains) -> tuple[float, np.ndarray]:
    """Potential scale reduction factor at every grid point.

    ``chains`` is a sequence of per-chain draw sequences (draw objects or
    arrays of any common shape). Returns ``(median, pointwise)``; points
    where every chain is constant get ``nan`` and are skipped in the median.
    """
    if len(chains) < 2:
        raise ModelError("Gelman-Rubin needs at least two chains")
    arrs = [_stack_surfaces(c) for c in chains]
    lengths = {a.shape[0] for a in arrs}
    if len(lengths) != 1:
        raise ModelError("chains must have equal retained lengths")
    n = lengths.pop()
    if n < 10:
        raise ModelError("need at least 10 retained draws per chain")
    X = np.stack(arrs)
    m = X.shape[0]
    chain_means = X.mean(axis=1)
    B = n * chain_means.var(axis=0, ddof=1)
    W = X.var(axis=1, ddof=1).mean(axis=0)
    var_hat = (n - 1) / n * W + B / n
    with np.errstate(divide="ignore", invalid="ignore"):
        rhat = np.sqrt(var_hat / W)
    rhat = np.where(W > 0, rhat, np.nan)
    finite = rhat[np.isfinite(rhat)]
    med = float(np.median(finite)) if finite.size else float("nan")
    return med, rhat


def percent_change(values):
    """Back-transform log-rate effects to percent change, ``100 (exp(v) - 1)``."""
    return 100.0 * np.expm1(np.asarray(values, dtype=float))


def percent_change_summary(summary: SurfaceSummary) -> SurfaceSummary:
    return SurfaceSummary(summary.grid_x, summary.grid_l, percent_change(summary.mean),
                          percent_change(summary.lower), percent_change(summary.upper),
                          summary.level, summary.widen, summary.one_sided)
