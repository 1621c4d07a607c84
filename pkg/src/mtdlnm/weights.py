"""Smooth bin weights and the design matrices they induce.

With bins covering the whole real line, the contribution of one nested
tree telescopes: ``sum_c delta_c psi_c(x) = sum_k theta_k Phi((x - s_k)/sigma_x)``
where ``s_k`` are the sorted split values. Each free increment therefore
has a design column equal to a smoothed count of lagged exposures above
its split value. :class:`ExposureBasis` precomputes those counts for every
grid split and every lag prefix so a column over any lag interval is one
subtraction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .core import Ensemble, ExposureTree, LaggedDataset, NestedTreeUnit, ordered_exposure_bins


def psi(x, lower, upper, sigma_x):
    """Gaussian-smoothed indicator of ``x`` in ``[lower, upper)``."""
    if not np.all(np.asarray(sigma_x) > 0):
        raise ValueError("sigma_x must be positive")
    x = np.asarray(x, dtype=float)
    return ndtr((upper - x) / sigma_x) - ndtr((lower - x) / sigma_x)


def default_sigma_x(exposures) -> float:
    """Half the standard deviation of the pooled exposure values."""
    return 0.5 * float(np.std(np.asarray(exposures, dtype=float)))


def default_split_grid(exposures) -> np.ndarray:
    """Deduplicated 1st..99th percentiles of the pooled exposure values."""
    pooled = np.asarray(exposures, dtype=float).ravel()
    return np.unique(np.percentile(pooled, np.arange(1, 100)))


class ExposureBasis:
    """Lag-prefix sums of ``Phi((x_{t-l} - s_k) / sigma_x)`` for each grid split.

    ``table[k, l, t]`` is the sum over lags ``0..l-1`` for row ``t``.
    """

    def __init__(self, exposures: np.ndarray, grid: np.ndarray, sigma_x: float):
        if not sigma_x > 0:
            raise ValueError("sigma_x must be positive")
        self.grid = np.asarray(grid, dtype=float)
        self.sigma_x = float(sigma_x)
        X = np.asarray(exposures, dtype=float)
        n, nl = X.shape
        table = np.zeros((self.grid.size, nl + 1, n))
        for k, s in enumerate(self.grid):
            np.cumsum(ndtr((X.T - s) / self.sigma_x), axis=0, out=table[k, 1:])
        self.table = table

    @property
    def n(self) -> int:
        return self.table.shape[2]

    def column(self, k: int, lo: int, hi: int) -> np.ndarray:
        return self.table[k, hi + 1] - self.table[k, lo]

    def block(self, indices, lo: int, hi: int) -> np.ndarray:
        """Increment-design rows (one per split index) for lags ``lo..hi``."""
        if len(indices) == 0:
            return np.empty((0, self.n))
        idx = np.asarray(indices, dtype=np.intp)
        return self.table[idx, hi + 1] - self.table[idx, lo]


@dataclass(frozen=True, eq=False)
class UnitDesign:
    """Bin-weight design of one unit with the structural-zero bins dropped.

    ``matrix[t, j]`` is the summed weight of row ``t``'s lagged exposures in
    bin ``columns[j] = (b, c)`` (``c >= 2``, 1-based bins).
    """

    matrix: np.ndarray
    columns: tuple[tuple[int, int], ...]

    def increment_design(self) -> np.ndarray:
        """Columns of ``U D^{-1}``: reverse cumulative sums within each nested tree."""
        out = np.empty_like(self.matrix)
        j = 0
        cols = self.columns
        while j < len(cols):
            b = cols[j][0]
            k = j
            while k < len(cols) and cols[k][0] == b:
                k += 1
            out[:, j:k] = np.cumsum(self.matrix[:, j:k][:, ::-1], axis=1)[:, ::-1]
            j = k
        return out


def compute_unit_design(unit: NestedTreeUnit, data: LaggedDataset, sigma_x: float) -> UnitDesign:
    """Direct bin-by-bin construction of the unit's design (reference path)."""
    cols, mats = [], []
    X = data.exposures
    for b, term in enumerate(unit.time_tree.terminals()):
        lags = X[:, term.lo:term.hi + 1]
        for c, (lower, upper) in enumerate(ordered_exposure_bins(term.exposure), start=1):
            if c == 1:
                continue
            mats.append(psi(lags, lower, upper, sigma_x).sum(axis=1))
            cols.append((b, c))
    matrix = np.column_stack(mats) if mats else np.empty((data.n, 0))
    return UnitDesign(matrix, tuple(cols))


def exposure_response(tree: ExposureTree, x, sigma_x: float) -> np.ndarray:
    """Smoothed monotone step function of one nested tree evaluated at ``x``."""
    x = np.asarray(x, dtype=float)
    s = np.asarray(tree.split_values(), dtype=float)
    if s.size == 0:
        return np.zeros_like(x)
    return ndtr((x[..., None] - s) / sigma_x) @ tree.increments


def evaluate_surface(ensemble: Ensemble, grid_x, grid_l, sigma_x: float) -> np.ndarray:
    """Exposure-lag-response ``w(x, l)`` on the grid, shape ``(len(grid_x), len(grid_l))``."""
    grid_x = np.asarray(grid_x, dtype=float)
    grid_l = np.asarray(grid_l, dtype=int)
    out = np.zeros((grid_x.size, grid_l.size))
    for unit in ensemble.units:
        for term in unit.time_tree.terminals():
            if term.exposure.n_bins == 1:
                continue
            mask = (grid_l >= term.lo) & (grid_l <= term.hi)
            if mask.any():
                out[:, mask] += exposure_response(term.exposure, grid_x, sigma_x)[:, None]
    return out


def fitted_effect(ensemble: Ensemble, data: LaggedDataset, sigma_x: float) -> np.ndarray:
    """Total lagged effect per row by direct bin summation."""
    f = np.zeros(data.n)
    for unit in ensemble.units:
        for term in unit.time_tree.terminals():
            lags = data.exposures[:, term.lo:term.hi + 1]
            for (lower, upper), d in zip(ordered_exposure_bins(term.exposure), term.exposure.delta):
                if d:
                    f += d * psi(lags, lower, upper, sigma_x).sum(axis=1)
    return f
