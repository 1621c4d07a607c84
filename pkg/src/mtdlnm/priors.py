"""Tree priors, prior-draw tree generation and split-location hyperpriors."""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, gammaln, logit

from .core import ExposureNode, ExposureTree, LEAF, TimeNode, TimeTree

Z975 = 1.959963984540054


def split_prob_standard(depth: int, alpha: float, beta: float) -> float:
    """BART split probability ``alpha (1 + depth)^-beta``."""
    return alpha * (1.0 + depth) ** (-beta)


def root_split_prob(lo: int, hi: int, gamma) -> float:
    """Zero-inflation probability: logistic of the mean selection logit over lags ``lo..hi``."""
    return float(expit(np.mean(np.asarray(gamma)[lo:hi + 1])))


def split_prob_zero_inflated(depth: int, lag_set, gamma, alpha_E: float, beta_E: float) -> float:
    """Exposure-tree split probability; ``lag_set`` is an inclusive ``(lo, hi)`` interval."""
    lo, hi = lag_set
    if hi < lo:
        raise ValueError("empty lag set")
    if depth == 0:
        return root_split_prob(lo, hi, gamma)
    return split_prob_standard(depth, alpha_E, beta_E)


# ---------------------------------------------------------- exposure trees

def draw_exposure_tree_from_prior(lag_set, gamma, split_grid, alpha_E, beta_E, rng,
                                  root_prob: float | None = None) -> ExposureTree:
    """Grow an exposure tree by forward simulation of the zero-inflated prior.

    Split values are uniform over grid values strictly inside the node's
    range; nodes with none left stay terminal.
    """
    grid = np.asarray(split_grid, dtype=float)
    if grid.size == 0:
        raise ValueError("split grid is empty")
    p0 = root_split_prob(*lag_set, gamma) if root_prob is None else root_prob

    def grow(lo, hi, depth):
        n_valid = hi - lo - 1
        if n_valid <= 0:
            return LEAF
        p = p0 if depth == 0 else split_prob_standard(depth, alpha_E, beta_E)
        if rng.random() >= p:
            return LEAF
        k = lo + 1 + int(rng.integers(n_valid))
        return ExposureNode(k, float(grid[k]), grow(lo, k, depth + 1), grow(k, hi, depth + 1))

    root = grow(-1, grid.size, 0)
    return ExposureTree(root, np.zeros(sum(1 for _ in _internal(root))))


def _internal(node):
    if node.is_leaf:
        return
    yield from _internal(node.left)
    yield node
    yield from _internal(node.right)


def log_exposure_tree_prior(tree: ExposureTree, lag_set, gamma, grid_size: int,
                            alpha_E: float, beta_E: float, root_prob: float | None = None) -> float:
    p0 = root_split_prob(*lag_set, gamma) if root_prob is None else root_prob

    def rec(node, lo, hi, depth):
        n_valid = hi - lo - 1
        p = 0.0 if n_valid <= 0 else (p0 if depth == 0 else split_prob_standard(depth, alpha_E, beta_E))
        if node.is_leaf:
            return math.log1p(-p) if p < 1 else -math.inf
        if p <= 0:
            return -math.inf
        k = node.index
        return (math.log(p) - math.log(n_valid)
                + rec(node.left, lo, k, depth + 1) + rec(node.right, k, hi, depth + 1))

    return rec(tree.root, -1, grid_size, 0)


# -------------------------------------------------------------- time trees

def _valid_rule_mass(split_probs, lo, hi) -> float:
    return float(np.sum(split_probs[lo:hi]))


def log_time_tree_prior(tree: TimeTree, split_probs, alpha_T: float, beta_T: float) -> float:
    """BART prior on the lag partition with split-location probabilities ``split_probs``.

    Single-lag nodes cannot split and contribute no terminal factor.
    """
    sp = np.asarray(split_probs, dtype=float)

    def rec(node: TimeNode, depth):
        p = split_prob_standard(depth, alpha_T, beta_T) if node.size > 1 else 0.0
        if node.is_leaf:
            return math.log1p(-p) if p < 1 else -math.inf
        rule = sp[node.split] / _valid_rule_mass(sp, node.lo, node.hi)
        return math.log(p) + math.log(rule) + rec(node.left, depth + 1) + rec(node.right, depth + 1)

    return rec(tree.root, 0)


def log_tree_prior(tree, *, split_probs=None, alpha_T=0.95, beta_T=2.0,
                   lag_set=None, gamma=None, grid_size=None, alpha_E=0.95, beta_E=2.0) -> float:
    """Log prior probability of a time tree or an exposure tree."""
    if isinstance(tree, TimeTree):
        if split_probs is None:
            split_probs = np.full(tree.L, 1.0 / max(tree.L, 1))
        return log_time_tree_prior(tree, split_probs, alpha_T, beta_T)
    return log_exposure_tree_prior(tree, lag_set, gamma, grid_size, alpha_E, beta_E)


def draw_time_tree_from_prior(L: int, split_probs, alpha_T, beta_T, rng,
                              exposure_factory=None) -> TimeTree:
    """Forward-simulate a lag partition; ``exposure_factory(lo, hi)`` fills terminals."""
    cum = np.concatenate([[0.0], np.cumsum(np.asarray(split_probs, dtype=float))]).tolist()

    def grow(lo, hi, depth):
        if hi > lo and rng.random() < split_prob_standard(depth, alpha_T, beta_T):
            # inverse-CDF draw of a rule between lags lo..hi-1 proportional to split_probs
            u = cum[lo] + rng.random() * (cum[hi] - cum[lo])
            s = min(max(bisect.bisect_right(cum, u) - 1, lo), hi - 1)
            return TimeNode(lo, hi, s, grow(lo, s, depth + 1), grow(s + 1, hi, depth + 1))
        exp = exposure_factory(lo, hi) if exposure_factory else None
        return TimeNode(lo, hi, exposure=exp)

    return TimeTree(grow(0, L, 0))


# --------------------------------------------------- split-location prior

@dataclass(frozen=True, eq=False)
class SplitLocationPrior:
    """Dirichlet(weights * kappa) prior on where time trees split.

    ``probs[l]`` is the probability of a rule splitting between lags
    ``l`` and ``l + 1``.
    """

    probs: np.ndarray
    weights: np.ndarray
    kappa: float
    kappa_fixed: bool = False

    def __post_init__(self):
        for name in ("probs", "weights"):
            v = np.asarray(getattr(self, name), dtype=float)
            if v.size and abs(v.sum() - 1) > 1e-12:
                raise ValueError(f"{name} must sum to one")
            object.__setattr__(self, name, v)

    @classmethod
    def uniform(cls, L: int, kappa: float | None = None, kappa_fixed=False) -> "SplitLocationPrior":
        d = np.full(L, 1.0 / L) if L > 0 else np.zeros(0)
        return cls(d.copy(), d, float(L if kappa is None else kappa), kappa_fixed)


def _dirichlet_logpdf(x, alpha) -> float:
    return float(gammaln(alpha.sum()) - gammaln(alpha).sum() + ((alpha - 1) * np.log(x)).sum())


def _sample_dirichlet(alpha, rng) -> np.ndarray:
    # log-space gamma draws keep tiny shapes from underflowing to exact zeros
    logg = np.log(rng.gamma(alpha + 1.0)) + np.log(rng.random(alpha.size)) / alpha
    logg -= logg.max()
    p = np.exp(logg)
    p = np.maximum(p / p.sum(), 1e-300)
    return p / p.sum()


def update_split_location_prior(split_counts, prior: SplitLocationPrior, rng) -> SplitLocationPrior:
    """Conjugate Dirichlet draw of the split probabilities, then an MH step for kappa.

    Kappa is proposed uniformly on ``kappa / (kappa + L)``, which is its
    Beta(1, 1) prior scale, so the acceptance ratio is the Dirichlet
    density ratio alone.
    """
    counts = np.asarray(split_counts, dtype=float)
    L = prior.weights.size
    if L == 0:
        return prior
    probs = _sample_dirichlet(prior.weights * prior.kappa + counts, rng)
    kappa = prior.kappa
    if not prior.kappa_fixed:
        rho = rng.random()
        prop = L * rho / (1.0 - rho) if rho > 0 else 1e-12
        prop = max(prop, 1e-12)
        log_r = (_dirichlet_logpdf(probs, prior.weights * prop)
                 - _dirichlet_logpdf(probs, prior.weights * kappa))
        if math.log(rng.random()) < log_r:
            kappa = prop
    return SplitLocationPrior(probs, prior.weights, kappa, prior.kappa_fixed)


# ------------------------------------------------------- selection prior

@dataclass(frozen=True, eq=False)
class SelectionPrior:
    """Independent normal priors on the per-lag selection logits."""

    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        if np.any(np.asarray(self.var) <= 0):
            raise ValueError("selection prior variances must be positive")


def selection_prior_from_interval(low: float, high: float) -> tuple[float, float]:
    """Normal (mean, variance) on the logit scale whose central 95% maps to ``(low, high)``."""
    if not 0 < low < high < 1:
        raise ValueError("need 0 < low < high < 1")
    lo, hi = logit(low), logit(high)
    return float((lo + hi) / 2), float(((hi - lo) / (2 * Z975)) ** 2)


def selection_prior_from_intervals(intervals) -> SelectionPrior:
    pairs = [selection_prior_from_interval(lo, hi) for lo, hi in intervals]
    return SelectionPrior(np.array([m for m, _ in pairs]), np.array([v for _, v in pairs]))


def informative_selection_intervals(L: int, effect_lags, inside=(0.95, 0.995), outside=(0.005, 0.995)):
    eff = set(effect_lags)
    return [inside if l in eff else outside for l in range(L + 1)]


def informative_split_weights(L: int, effect_lags, ratio: float = 10.0) -> np.ndarray:
    """Dirichlet weights favouring splits between ``l`` and ``l+1`` for effect lags ``l``."""
    eff = set(effect_lags)
    w = np.array([ratio if l in eff else 1.0 for l in range(L)])
    return w / w.sum()
