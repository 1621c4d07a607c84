"""Domain types: lagged data, nested time/exposure trees, parameters.

Trees are immutable values. Samplers build new trees instead of editing
old ones, so a tree can be shared between a chain state and its retained
draws without copying.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np


class ModelError(Exception):
    """Base class for errors raised by this package."""


class EmptyDatasetError(ModelError, ValueError):
    pass


class AlignmentError(ModelError, ValueError):
    pass


class ConstraintViolationError(ModelError, ValueError):
    pass


class ConfigError(ModelError, ValueError):
    pass


class RankDeficiencyError(ModelError, np.linalg.LinAlgError):
    pass


# --------------------------------------------------------------------- data

@dataclass(frozen=True, eq=False)
class LaggedDataset:
    """Outcome, lagged exposure matrix and covariates on complete rows.

    ``exposures[:, l]`` holds the exposure ``l`` time steps before the
    outcome row. ``covariates`` should contain an intercept column.
    """

    outcomes: np.ndarray
    exposures: np.ndarray
    covariates: np.ndarray
    lag_count: int
    trial_counts: np.ndarray | None = None
    time_index: np.ndarray | None = None

    def __post_init__(self):
        n = self.outcomes.shape[0]
        if n == 0:
            raise EmptyDatasetError("dataset has no complete rows")
        if self.exposures.shape != (n, self.lag_count + 1):
            raise AlignmentError(
                f"exposures must be {n}x{self.lag_count + 1}, got {self.exposures.shape}")
        if self.covariates.ndim != 2 or self.covariates.shape[0] != n:
            raise AlignmentError("covariates must have one row per outcome")
        if self.trial_counts is not None and self.trial_counts.shape != (n,):
            raise AlignmentError("trial_counts must have one entry per outcome")
        for name in ("outcomes", "exposures", "covariates"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} contains non-finite values")

    @property
    def n(self) -> int:
        return self.outcomes.shape[0]

    @property
    def n_lags(self) -> int:
        return self.lag_count + 1


def build_lagged_design(exposure_series, outcomes, covariates=None, L: int = 0,
                        trial_counts=None, time_index=None) -> LaggedDataset:
    """Align a daily exposure series with outcomes into a lagged design.

    All inputs are positionally aligned on a common time index. Row ``t``
    of the result has exposures ``(x_t, x_{t-1}, ..., x_{t-L})``; rows with
    any missing value in the lag window, outcome, covariates or trial count
    are dropped. ``covariates=None`` gives an intercept-only design.
    """
    x = np.asarray(exposure_series, dtype=float)
    y = np.asarray(outcomes, dtype=float)
    if L < 0:
        raise ValueError("L must be nonnegative")
    if x.ndim != 1 or y.ndim != 1 or x.shape[0] != y.shape[0]:
        raise AlignmentError("exposure and outcome series must be 1-d and the same length")
    T = x.shape[0]
    Z = np.ones((T, 1)) if covariates is None else np.asarray(covariates, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    if Z.shape[0] != T:
        raise AlignmentError("covariate rows do not align with the outcome series")
    counts = None
    if trial_counts is not None:
        counts = np.asarray(trial_counts, dtype=float)
        if counts.shape != (T,):
            raise AlignmentError("trial counts do not align with the outcome series")
    tidx = np.arange(T) if time_index is None else np.asarray(time_index)
    if tidx.shape[0] != T:
        raise AlignmentError("time index does not align with the outcome series")

    if T <= L:
        raise EmptyDatasetError("series shorter than the lag window")
    windows = np.lib.stride_tricks.sliding_window_view(x, L + 1)[:, ::-1]
    rows = np.arange(L, T)
    ok = np.all(np.isfinite(windows), axis=1)
    ok &= np.isfinite(y[rows]) & np.all(np.isfinite(Z[rows]), axis=1)
    if counts is not None:
        ok &= np.isfinite(counts[rows])
    keep = rows[ok]
    if keep.size == 0:
        raise EmptyDatasetError("no row has a complete lag window")
    return LaggedDataset(
        outcomes=y[keep].copy(),
        exposures=np.ascontiguousarray(windows[ok]),
        covariates=Z[keep].copy(),
        lag_count=L,
        trial_counts=None if counts is None else counts[keep].astype(np.int64),
        time_index=tidx[keep],
    )


# ------------------------------------------------------------ monotone map

def difference_matrix(size: int) -> np.ndarray:
    """First-order difference matrix D with ``D @ delta = theta``."""
    return np.eye(size) - np.eye(size, k=-1)


def delta_from_theta(theta_blocks):
    """Cumulative levels from increments, one block per nested tree.

    Each block must start with the structural zero and be nonnegative.
    Accepts a single vector or a sequence of vectors.
    """
    single = np.ndim(theta_blocks[0]) == 0 if len(theta_blocks) else False
    blocks = [theta_blocks] if single else theta_blocks
    out = []
    for block in blocks:
        th = np.asarray(block, dtype=float)
        if th.size == 0:
            raise ConstraintViolationError("empty increment block")
        if th[0] != 0.0:
            raise ConstraintViolationError("first increment must be exactly zero")
        if np.any(th < 0):
            raise ConstraintViolationError("increments must be nonnegative")
        out.append(np.cumsum(th))
    return out[0] if single else out


def theta_from_delta(delta) -> np.ndarray:
    d = np.asarray(delta, dtype=float)
    return difference_matrix(d.size) @ d


# ------------------------------------------------------------ exposure tree

@dataclass(frozen=True, eq=False)
class ExposureNode:
    """Exposure-tree node. Internal nodes carry a split-grid index and value."""

    index: int | None = None
    value: float | None = None
    left: "ExposureNode | None" = None
    right: "ExposureNode | None" = None

    @property
    def is_leaf(self) -> bool:
        return self.index is None


LEAF = ExposureNode()


@dataclass(frozen=True, eq=False)
class ExposureTree:
    """Monotone step function of exposure within one lag set.

    ``increments`` holds the free increments for bins 2..C (the first
    increment is the structural zero and is not stored).
    """

    root: ExposureNode = LEAF
    increments: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        inc = np.asarray(self.increments, dtype=float)
        object.__setattr__(self, "increments", inc)
        if inc.shape != (self.n_bins - 1,):
            raise ConstraintViolationError(
                f"tree with {self.n_bins} bins needs {self.n_bins - 1} increments, got {inc.shape}")
        if np.any(inc < 0):
            raise ConstraintViolationError("increments must be nonnegative")

    def _walk(self, node: ExposureNode) -> Iterator[ExposureNode]:
        if node.is_leaf:
            return
        yield from self._walk(node.left)
        yield node
        yield from self._walk(node.right)

    def split_indices(self) -> list[int]:
        """Grid indices of internal splits in increasing order."""
        return [nd.index for nd in self._walk(self.root)]

    def split_values(self) -> list[float]:
        return [nd.value for nd in self._walk(self.root)]

    @property
    def n_bins(self) -> int:
        return sum(1 for _ in self._walk(self.root)) + 1

    @property
    def theta(self) -> np.ndarray:
        return np.concatenate([[0.0], self.increments])

    @property
    def delta(self) -> np.ndarray:
        return np.cumsum(self.theta)

    def with_increments(self, increments) -> "ExposureTree":
        return ExposureTree(self.root, np.asarray(increments, dtype=float))

    def same_shape(self, other: "ExposureTree") -> bool:
        def eq(a, b):
            if a.is_leaf or b.is_leaf:
                return a.is_leaf and b.is_leaf
            return a.index == b.index and eq(a.left, b.left) and eq(a.right, b.right)
        return eq(self.root, other.root)


# shared no-split tree; trees are immutable so one instance serves every terminal
EMPTY_EXPOSURE = ExposureTree()


def ordered_exposure_bins(tree: ExposureTree) -> list[tuple[float, float]]:
    """Terminal bins ``[lower, upper)`` sorted by lower bound; outer bounds infinite."""
    cuts = [-np.inf, *tree.split_values(), np.inf]
    return list(zip(cuts[:-1], cuts[1:]))


def exposure_tree_from_splits(splits: Sequence[tuple[int, float]], increments=None) -> ExposureTree:
    """Build a tree by inserting ``(grid_index, value)`` splits in the given order."""
    def insert(node, idx, val):
        if node.is_leaf:
            return ExposureNode(idx, float(val), LEAF, LEAF)
        if idx == node.index:
            raise ValueError(f"duplicate split index {idx}")
        if idx < node.index:
            return dataclasses.replace(node, left=insert(node.left, idx, val))
        return dataclasses.replace(node, right=insert(node.right, idx, val))

    root = LEAF
    for idx, val in splits:
        root = insert(root, int(idx), val)
    n_inc = len(splits)
    inc = np.zeros(n_inc) if increments is None else increments
    return ExposureTree(root, inc)


# ---------------------------------------------------------------- time tree

@dataclass(frozen=True, eq=False)
class TimeNode:
    """Node over the contiguous lag interval ``[lo, hi]``.

    An internal node with ``split = s`` sends lags ``<= s`` left. Terminal
    nodes own an exposure tree.
    """

    lo: int
    hi: int
    split: int | None = None
    left: "TimeNode | None" = None
    right: "TimeNode | None" = None
    exposure: ExposureTree | None = None

    def __post_init__(self):
        if self.lo > self.hi:
            raise ValueError("empty lag interval")
        if self.split is None:
            if self.exposure is None:
                object.__setattr__(self, "exposure", EMPTY_EXPOSURE)
        else:
            if not self.lo <= self.split < self.hi:
                raise ValueError(f"split {self.split} invalid on [{self.lo}, {self.hi}]")
            if (self.left.lo, self.left.hi) != (self.lo, self.split) or \
                    (self.right.lo, self.right.hi) != (self.split + 1, self.hi):
                raise ValueError("child intervals inconsistent with split")

    @property
    def is_leaf(self) -> bool:
        return self.split is None

    @property
    def size(self) -> int:
        return self.hi - self.lo + 1


def time_subtree(lo: int, hi: int, splits: Sequence[int]) -> TimeNode:
    """Build a subtree on ``[lo, hi]`` inserting splits in order (preorder)."""
    def insert(node, s):
        if node.is_leaf:
            return TimeNode(node.lo, node.hi, s, TimeNode(node.lo, s), TimeNode(s + 1, node.hi))
        if s == node.split:
            raise ValueError(f"duplicate split {s}")
        if s < node.split:
            return TimeNode(node.lo, node.hi, node.split, insert(node.left, s), node.right)
        return TimeNode(node.lo, node.hi, node.split, node.left, insert(node.right, s))

    root = TimeNode(lo, hi)
    for s in splits:
        root = insert(root, int(s))
    return root


@dataclass(frozen=True, eq=False)
class TimeTree:
    """Binary partition of lags ``0..L`` with one exposure tree per terminal."""

    root: TimeNode

    @classmethod
    def stump(cls, L: int, exposure: ExposureTree | None = None) -> "TimeTree":
        return cls(TimeNode(0, L, exposure=exposure))

    @classmethod
    def from_splits(cls, L: int, splits: Sequence[int]) -> "TimeTree":
        return cls(time_subtree(0, L, splits))

    @property
    def L(self) -> int:
        return self.root.hi

    def terminals(self) -> list[TimeNode]:
        out = []

        def rec(node):
            if node.is_leaf:
                out.append(node)
            else:
                rec(node.left)
                rec(node.right)
        rec(self.root)
        return out

    def nodes(self) -> list[tuple[tuple[int, ...], TimeNode, int]]:
        """All nodes as ``(path, node, depth)`` in preorder; path entries are 0/1."""
        out = []

        def rec(node, path):
            out.append((path, node, len(path)))
            if not node.is_leaf:
                rec(node.left, path + (0,))
                rec(node.right, path + (1,))
        rec(self.root, ())
        return out

    def internal_splits(self) -> list[int]:
        return [nd.split for _, nd, _ in self.nodes() if not nd.is_leaf]

    @property
    def n_terminals(self) -> int:
        return len(self.terminals())

    def exposure_trees(self) -> list[ExposureTree]:
        return [t.exposure for t in self.terminals()]

    def with_exposures(self, trees: Sequence[ExposureTree]) -> "TimeTree":
        it = iter(trees)

        def rec(node):
            if node.is_leaf:
                return TimeNode(node.lo, node.hi, exposure=next(it))
            return TimeNode(node.lo, node.hi, node.split, rec(node.left), rec(node.right))
        new = TimeTree(rec(self.root))
        if next(it, None) is not None:
            raise ValueError("too many exposure trees")
        return new

    def replace(self, path: tuple[int, ...], node: TimeNode) -> "TimeTree":
        def rec(cur, depth):
            if depth == len(path):
                return node
            if path[depth] == 0:
                return TimeNode(cur.lo, cur.hi, cur.split, rec(cur.left, depth + 1), cur.right)
            return TimeNode(cur.lo, cur.hi, cur.split, cur.left, rec(cur.right, depth + 1))
        return TimeTree(rec(self.root, 0))


def terminal_lag_sets(tree: TimeTree) -> list[tuple[int, int]]:
    """Terminal lag intervals ``(lo, hi)`` inclusive, left to right."""
    return [(t.lo, t.hi) for t in tree.terminals()]


def relabel_subtree(node: TimeNode, lo: int, hi: int, split: int | None = None) -> TimeNode:
    """Re-range a subtree onto ``[lo, hi]`` keeping descendant splits and exposure trees.

    ``split`` overrides the split at ``node`` itself.
    """
    if node.is_leaf:
        return TimeNode(lo, hi, exposure=node.exposure)
    s = node.split if split is None else split
    return TimeNode(lo, hi, s, relabel_subtree(node.left, lo, s), relabel_subtree(node.right, s + 1, hi))


# ---------------------------------------------------------------- ensemble

@dataclass(frozen=True, eq=False)
class NestedTreeUnit:
    time_tree: TimeTree
    index: int = 0

    @property
    def n_free(self) -> int:
        return sum(e.n_bins - 1 for e in self.time_tree.exposure_trees())


@dataclass(eq=False)
class HyperState:
    sigma: float
    nu: float
    gamma: np.ndarray
    split_probs: np.ndarray
    kappa: float
    zeta: np.ndarray
    sigma_aux: float = 1.0
    nu_aux: float = 1.0
    omega: np.ndarray | None = None

    def __post_init__(self):
        if not (self.sigma > 0 and self.nu > 0 and self.kappa > 0):
            raise ConstraintViolationError("sigma, nu and kappa must be positive")
        sp = np.asarray(self.split_probs, dtype=float)
        if sp.size and (abs(sp.sum() - 1.0) > 1e-12 or np.any(sp <= 0)):
            raise ConstraintViolationError("split_probs must be a strictly positive simplex")


@dataclass(frozen=True, eq=False)
class Ensemble:
    units: tuple[NestedTreeUnit, ...]
    hyper: HyperState | None = None

    def __post_init__(self):
        if len(self.units) < 1:
            raise ValueError("an ensemble needs at least one unit")


# ------------------------------------------------------------------ config

@dataclass
class ModelConfig:
    """Model and sampler settings. Field names double as config-file keys."""

    num_trees: int = 20
    alpha_T: float = 0.95
    beta_T: float = 2.0
    alpha_E: float = 0.95
    beta_E: float = 2.0
    sigma_x: float | None = None
    gamma_prior_mean: list | None = None
    gamma_prior_var: list | float | None = None
    gamma_prior_intervals: list | None = None
    dirichlet_weights: list | None = None
    kappa_mode: str | float = "learned"
    fixed_split_probs: bool = False
    ridge_scale: float = 1e6
    iterations: int = 7000
    burn_in: int = 2000
    thinning: int = 10
    chains: int = 2
    seed: int = 0
    outcome_family: str = "gaussian"
    fixed_time_trees: list | None = None
    exposure_split_grid: list | None = None
    orthant_mc_size: int = 512
    tmvn_sweeps: int = 10
    grid_x: list | None = None
    grid_l: list | None = None
    check_every: int = 100

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.num_trees < 1:
            raise ConfigError("num_trees must be >= 1")
        if not 0 <= self.burn_in < self.iterations:
            raise ConfigError("need 0 <= burn_in < iterations")
        if self.thinning < 1:
            raise ConfigError("thinning must be >= 1")
        if self.chains < 1:
            raise ConfigError("chains must be >= 1")
        if self.outcome_family not in ("gaussian", "binomial"):
            raise ConfigError(f"unknown outcome_family {self.outcome_family!r}")
        for name in ("alpha_T", "alpha_E"):
            if not 0 <= getattr(self, name) < 1:
                raise ConfigError(f"{name} must be in [0, 1)")
        for name in ("beta_T", "beta_E", "ridge_scale"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.sigma_x is not None and not self.sigma_x > 0:
            raise ConfigError("sigma_x must be positive")
        var = self.gamma_prior_var
        if var is not None and np.any(np.asarray(var, dtype=float) <= 0):
            raise ConfigError("gamma_prior_var entries must be positive")
        if self.dirichlet_weights is not None:
            d = np.asarray(self.dirichlet_weights, dtype=float)
            if np.any(d < 0) or d.sum() <= 0:
                raise ConfigError("dirichlet_weights must be nonnegative with positive sum")
        if isinstance(self.kappa_mode, str):
            if self.kappa_mode != "learned":
                raise ConfigError("kappa_mode must be 'learned' or a positive number")
        elif not float(self.kappa_mode) > 0:
            raise ConfigError("fixed kappa must be positive")
        if self.orthant_mc_size < 2:
            raise ConfigError("orthant_mc_size must be >= 2")
        if self.tmvn_sweeps < 1:
            raise ConfigError("tmvn_sweeps must be >= 1")

    @classmethod
    def from_dict(cls, values: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**values)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)
