"""Hybrid Gibbs / Metropolis-Hastings sampler for the monotone nested-tree model.

Tree structures are updated with the increments integrated out, using the
collapsed likelihood of the partial residual. The covariate coefficients
are integrated out as well, which turns the residual covariance into
``sigma^2 V_Z`` with ``V_Z = W^-1 + c Z Z'`` (``W`` the observation weights,
identity for Gaussian outcomes).
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.special import ndtr

from .core import (
    ConfigError, Ensemble, ExposureTree, HyperState, LaggedDataset, ModelConfig, ModelError,
    NestedTreeUnit, RankDeficiencyError, TimeNode, TimeTree, relabel_subtree, time_subtree,
)
from .priors import (
    SplitLocationPrior, draw_exposure_tree_from_prior, log_exposure_tree_prior,
    log_time_tree_prior, selection_prior_from_intervals, update_split_location_prior,
)
from .samplers import (
    ghk_uniforms, log_orthant_prob_chol, make_rng, sample_mvn_prec, sample_polya_gamma,
    sample_tmvn_nonneg_prec, update_halfcauchy_variance,
)
from .weights import ExposureBasis, default_sigma_x, default_split_grid

log = logging.getLogger(__name__)

LOG_2PI = math.log(2 * math.pi)
LOG2 = math.log(2.0)
# logit-scale variance putting 95% of the root split probability in (0.25, 0.75)
DEFAULT_SELECTION_VAR = 0.314


class NumericalError(ModelError, FloatingPointError):
    pass


# ----------------------------------------------------------- projection

@dataclass(eq=False)
class ProjectionCache:
    """Applies ``V_Z^{-1}`` without forming any n-by-n matrix.

    ``V_Z^{-1} = W - W Z V_zeta Z' W`` with ``V_zeta = (Z' W Z + I/c)^{-1}``.
    """

    Z: np.ndarray
    c: float
    weights: np.ndarray | None
    V_zeta: np.ndarray
    logdet_VZ: float

    def apply(self, v: np.ndarray) -> np.ndarray:
        """``V_Z^{-1}`` applied along the last axis of ``v``."""
        wv = v if self.weights is None else v * self.weights
        corr = ((wv @ self.Z) @ self.V_zeta) @ self.Z.T
        if self.weights is not None:
            corr = corr * self.weights
        return wv - corr

    def zeta_mean(self, r: np.ndarray) -> np.ndarray:
        wr = r if self.weights is None else r * self.weights
        return self.V_zeta @ (self.Z.T @ wr)


def build_projection(Z, c: float, weights=None) -> ProjectionCache:
    Z = np.asarray(Z, dtype=float)
    n, p = Z.shape
    if p > n:
        raise RankDeficiencyError(f"{p} covariates for {n} rows")
    if p:
        _, R, piv = scipy.linalg.qr(Z, mode="economic", pivoting=True)
        d = np.abs(np.diag(R))
        tol = max(n, p) * np.finfo(float).eps * (d[0] if d.size else 0.0)
        rank = int(np.sum(d > tol))
        if rank < p:
            bad = sorted(int(j) for j in piv[rank:])
            raise RankDeficiencyError(f"covariate matrix is rank deficient; dependent columns {bad}")
    w = None if weights is None else np.asarray(weights, dtype=float)
    ZtWZ = Z.T @ Z if w is None else Z.T @ (Z * w[:, None])
    inv_c = 0.0 if math.isinf(c) else 1.0 / c
    A = ZtWZ + inv_c * np.eye(p)
    if p:
        La = np.linalg.cholesky(A)
        Li = np.linalg.inv(La)
        V_zeta = Li.T @ Li
        logdet_A = 2 * float(np.log(np.diag(La)).sum())
    else:
        V_zeta = np.zeros((0, 0))
        logdet_A = 0.0
    # with a flat covariate prior the p*log(c) term is an infinite constant; drop it
    logdet = (0.0 if math.isinf(c) else p * math.log(c)) + logdet_A
    if w is not None:
        logdet -= float(np.log(w).sum())
    return ProjectionCache(Z, c, w, V_zeta, logdet)


# ----------------------------------------------- collapsed likelihood

@dataclass(eq=False)
class ThetaConditional:
    """Full conditional ``TN(mean, sigma^2 prec_unscaled^-1)`` on the orthant."""

    mean: np.ndarray
    prec_unscaled: np.ndarray
    chol: np.ndarray
    chol_inv: np.ndarray
    score: np.ndarray


def theta_conditional(W, R, proj: ProjectionCache, nu: float) -> ThetaConditional:
    """``W`` holds increment-design columns as rows, shape ``(q, n)``."""
    q = W.shape[0]
    AW = proj.apply(W)
    G = W @ AW.T
    score = AW @ R
    P = G + np.eye(q) / (nu * nu)
    for attempt in range(4):
        try:
            Lp = np.linalg.cholesky(P)
            break
        except np.linalg.LinAlgError:
            P = P + np.eye(q) * 1e-10 * max(np.trace(P), 1.0) * 10**attempt
    else:
        raise NumericalError("increment conditional precision is not positive definite")
    Li = np.linalg.inv(Lp)
    mean = Li.T @ (Li @ score)
    return ThetaConditional(mean, P, Lp, Li, score)


def log_marginal_from_design(W, R, proj: ProjectionCache, sigma: float, nu: float,
                             unif=None, *, mc_size: int = 512, rng=None, rq: float | None = None) -> float:
    """Log density of the residual with nonnegative increments integrated out.

    Gaussian integral in closed form, times the orthant probability of the
    full conditional (GHK), divided by the prior orthant mass ``2^-q``.
    """
    W = np.asarray(W, dtype=float)
    R = np.asarray(R, dtype=float)
    n = R.size
    s2 = sigma * sigma
    if rq is None:
        rq = float(R @ proj.apply(R))
    base = -0.5 * n * (LOG_2PI + math.log(s2)) - 0.5 * proj.logdet_VZ - rq / (2 * s2)
    q = W.shape[0]
    if q == 0:
        return base
    tc = theta_conditional(W, R, proj, nu)
    quad = float(tc.score @ tc.mean)
    logdet_vtheta = -2.0 * float(np.log(np.diag(tc.chol)).sum())
    if unif is None:
        unif = ghk_uniforms(q, mc_size, rng if rng is not None else make_rng(0x6A4B))
    log_orth = _orthant_from_chol(tc, sigma, unif)
    return (base + q * LOG2 - q * math.log(nu) + 0.5 * logdet_vtheta
            + quad / (2 * s2) + log_orth)


def _orthant_from_chol(tc: ThetaConditional, sigma: float, unif) -> float:
    # cov = sigma^2 P^-1 = (sigma Lp^-T)(sigma Lp^-T)'; Lp^-T is upper triangular,
    # so reversing coordinate order yields a lower-triangular factor.
    upper = sigma * tc.chol_inv.T
    return log_orthant_prob_chol(tc.mean[::-1], upper[::-1, ::-1], unif)


def unit_design_rows(unit: NestedTreeUnit | TimeTree, basis: ExposureBasis) -> np.ndarray:
    tree = unit.time_tree if isinstance(unit, NestedTreeUnit) else unit
    blocks = [basis.block(t.exposure.split_indices(), t.lo, t.hi) for t in tree.terminals()]
    return np.concatenate(blocks) if blocks else np.empty((0, basis.n))


def log_marginal(residual, unit, basis: ExposureBasis, projection: ProjectionCache,
                 sigma: float, nu: float, mc_size: int = 512, rng=None) -> float:
    """Collapsed log likelihood of a unit's partial residual given its trees."""
    W = unit_design_rows(unit, basis)
    return log_marginal_from_design(W, residual, projection, sigma, nu, mc_size=mc_size, rng=rng)


def sample_theta_block(unit, residual, basis: ExposureBasis, projection: ProjectionCache,
                       sigma: float, nu: float, rng, sweeps: int = 10, init=None) -> NestedTreeUnit:
    """Draw a unit's increments from their truncated-normal full conditional."""
    tree = unit.time_tree if isinstance(unit, NestedTreeUnit) else unit
    W = unit_design_rows(tree, basis)
    if W.shape[0] == 0:
        return unit if isinstance(unit, NestedTreeUnit) else NestedTreeUnit(tree)
    tc = theta_conditional(W, np.asarray(residual, dtype=float), projection, nu)
    theta = sample_tmvn_nonneg_prec(tc.mean, tc.prec_unscaled / (sigma * sigma), rng, sweeps, init)
    out, i = [], 0
    for e in tree.exposure_trees():
        k = e.n_bins - 1
        out.append(e.with_increments(theta[i:i + k]))
        i += k
    idx = unit.index if isinstance(unit, NestedTreeUnit) else 0
    return NestedTreeUnit(tree.with_exposures(out), idx)


# ----------------------------------------------------------- chain state

@dataclass
class PosteriorDraw:
    iteration: int
    surface: np.ndarray
    effect_lags: np.ndarray
    sigma: float
    nu: float
    gamma: np.ndarray
    kappa: float
    time_terminals: np.ndarray
    exposure_terminals: float
    zeta: np.ndarray


@dataclass
class ChainResult:
    chain_id: int
    draws: list
    grid_x: np.ndarray
    grid_l: np.ndarray
    acceptance: dict
    traces: dict
    seconds: float
    seed: int
    monotone_violations: int = 0


class _Unit:
    __slots__ = ("tree", "terms", "paths", "blocks", "theta", "fit", "fixed")

    def __init__(self, tree: TimeTree, basis: ExposureBasis, n: int, fixed: bool):
        self.fixed = fixed
        self.fit = np.zeros(n)
        self.set_tree(tree, basis)
        self.theta = [np.zeros(b.shape[0]) for b in self.blocks]

    def set_tree(self, tree, basis, reuse=None):
        self.tree = tree
        nodes = tree.nodes()
        self.terms = [nd for _, nd, _ in nodes if nd.is_leaf]
        self.paths = [p for p, nd, _ in nodes if nd.is_leaf]
        reuse = reuse or {}
        self.blocks = [reuse.get((id(t.exposure), t.lo, t.hi))
                       if (id(t.exposure), t.lo, t.hi) in reuse
                       else basis.block(t.exposure.split_indices(), t.lo, t.hi)
                       for t in self.terms]

    def design(self) -> np.ndarray:
        if len(self.blocks) == 1:
            return self.blocks[0]
        return np.concatenate(self.blocks)

    @property
    def n_free(self) -> int:
        return sum(b.shape[0] for b in self.blocks)


class _CRN:
    """Block of uniforms shared by every GHK call in one unit update.

    Rows are appended from ``rng`` on demand, so a call needing ``q`` rows
    always sees the same first ``q`` rows as every other call.
    """

    def __init__(self, rng, half: int, rows: int = 12):
        self.rng = rng
        self._u = rng.random((rows, half))

    def get(self, q: int) -> np.ndarray:
        have = self._u.shape[0]
        if have < q:
            extra = self.rng.random((max(q, 2 * have) - have, self._u.shape[1]))
            self._u = np.concatenate([self._u, extra])
        return self._u[:q]


@dataclass
class _Ctx:
    R: np.ndarray
    rq: float
    crn: _CRN


def _has_intercept(Z: np.ndarray) -> bool:
    return bool(np.any(np.all(np.isclose(Z, Z[:1]), axis=0) & (np.abs(Z[0]) > 0)))


class Chain:
    """One Markov chain. Owns its state and random stream; strictly sequential."""

    def __init__(self, data: LaggedDataset, config: ModelConfig, chain_id: int = 0, *,
                 constant_likelihood: bool = False):
        cfg = config
        self.data = data
        self.cfg = cfg
        self.chain_id = chain_id
        self.constant_likelihood = constant_likelihood
        self.rng = make_rng(cfg.seed, chain_id)
        self.L = L = data.lag_count
        self.n = n = data.n
        self.gaussian = cfg.outcome_family == "gaussian"
        Z = data.covariates

        if self.gaussian:
            y = data.outcomes
            self.y_shift = float(y.mean()) if _has_intercept(Z) else 0.0
            sd = float(np.std(y - self.y_shift))
            self.y_scale = sd if sd > 0 else 1.0
            self.y = (y - self.y_shift) / self.y_scale
            self.weights = None
        else:
            if data.trial_counts is None:
                raise ConfigError("binomial family needs trial counts")
            self.y_shift, self.y_scale = 0.0, 1.0
            self.trials = data.trial_counts.astype(float)
            self.kappa_obs = data.outcomes - self.trials / 2
            self.weights = np.maximum(self.trials / 4.0, 1e-8)
            self.y = self.kappa_obs / self.weights

        grid = (default_split_grid(data.exposures) if cfg.exposure_split_grid is None
                else np.unique(np.asarray(cfg.exposure_split_grid, dtype=float)))
        sigma_x = cfg.sigma_x if cfg.sigma_x is not None else default_sigma_x(data.exposures)
        self.basis = ExposureBasis(data.exposures, grid, sigma_x)
        self.grid = self.basis.grid
        self.sigma_x = self.basis.sigma_x
        lo_x, hi_x = float(data.exposures.min()), float(data.exposures.max())
        self.grid_x = (np.arange(math.floor(lo_x), math.ceil(hi_x) + 1, dtype=float)
                       if cfg.grid_x is None else np.asarray(cfg.grid_x, dtype=float))
        self.grid_l = np.arange(L + 1) if cfg.grid_l is None else np.asarray(cfg.grid_l, dtype=int)

        self.gamma_mean, self.gamma_var = selection_prior_arrays(cfg, L)
        d = (np.full(L, 1.0 / max(L, 1)) if cfg.dirichlet_weights is None
             else np.asarray(cfg.dirichlet_weights, dtype=float) / np.sum(cfg.dirichlet_weights))
        if L and d.size != L:
            raise ConfigError(f"dirichlet_weights needs {L} entries")
        if L and np.any(d <= 0):
            raise ConfigError("dirichlet_weights must be strictly positive")
        kappa_fixed = cfg.kappa_mode != "learned"
        kappa = float(L if not kappa_fixed else cfg.kappa_mode) or 1.0
        self.split_prior = SplitLocationPrior(d.copy(), d, kappa, kappa_fixed) if L else \
            SplitLocationPrior(np.zeros(0), np.zeros(0), 1.0, True)

        self.proj = build_projection(Z, cfg.ridge_scale, self.weights)
        self.hyper = HyperState(
            sigma=1.0, nu=1.0, gamma=self.gamma_mean.copy(),
            split_probs=self.split_prior.probs, kappa=self.split_prior.kappa,
            zeta=np.zeros(Z.shape[1]),
            omega=None if self.gaussian else self.weights.copy(),
        )
        self._set_gamma(self.gamma_mean.copy())
        fixed = cfg.fixed_time_trees or []
        if len(fixed) > cfg.num_trees:
            raise ConfigError("more fixed time trees than num_trees")
        self.units = []
        for a in range(cfg.num_trees):
            if a < len(fixed):
                tree = TimeTree(time_subtree(0, L, [int(s) for s in fixed[a]]))
            else:
                tree = TimeTree.stump(L)
            self.units.append(_Unit(tree, self.basis, n, fixed=a < len(fixed)))
        self.f = np.zeros(n)
        self.half = max(1, (cfg.orthant_mc_size + 1) // 2)
        self.iteration = 0
        self.accept = {k: [0, 0] for k in ("grow", "prune", "change", "exposure")}

    # ------------------------------------------------------------ helpers

    def _lm(self, blocks, ctx: _Ctx) -> float:
        if self.constant_likelihood:
            return 0.0
        W = np.concatenate(blocks) if len(blocks) > 1 else blocks[0]
        q = W.shape[0]
        val = log_marginal_from_design(W, ctx.R, self.proj, self.hyper.sigma, self.hyper.nu,
                                       ctx.crn.get(q) if q else None, rq=ctx.rq)
        if not math.isfinite(val):
            raise NumericalError(f"non-finite marginal likelihood at iteration {self.iteration}")
        return val

    def _draw_exposure(self, lo, hi) -> ExposureTree:
        c = self.cfg
        return draw_exposure_tree_from_prior((lo, hi), self.hyper.gamma, self.grid,
                                             c.alpha_E, c.beta_E, self.rng,
                                             root_prob=self._root_prob(lo, hi))

    def _root_prob(self, lo, hi) -> float:
        m = (self._gamma_cum[hi + 1] - self._gamma_cum[lo]) / (hi - lo + 1)
        return 1.0 / (1.0 + math.exp(-m))

    def _set_gamma(self, gamma):
        self.hyper.gamma = gamma
        self._gamma_cum = np.concatenate([[0.0], np.cumsum(gamma)]).tolist()

    def _log_time_prior(self, tree) -> float:
        return log_time_tree_prior(tree, self.split_prior.probs, self.cfg.alpha_T, self.cfg.beta_T)

    def _log_exp_prior(self, node: TimeNode) -> float:
        c = self.cfg
        return log_exposure_tree_prior(node.exposure, (node.lo, node.hi), self.hyper.gamma,
                                       self.grid.size, c.alpha_E, c.beta_E,
                                       root_prob=self._root_prob(node.lo, node.hi))

    @staticmethod
    def _move_sets(tree: TimeTree):
        nodes = tree.nodes()
        internal = [(p, nd, d) for p, nd, d in nodes if not nd.is_leaf]
        splittable = [(p, nd, d) for p, nd, d in nodes if nd.is_leaf and nd.size > 1]
        nog = [(p, nd, d) for p, nd, d in internal if nd.left.is_leaf and nd.right.is_leaf]
        moves = (["grow"] if splittable else []) + (["prune", "change"] if internal else [])
        return moves, internal, splittable, nog

    # ---------------------------------------------------------- tree moves

    def _time_move(self, u: _Unit, ctx: _Ctx, lm: float):
        tree = u.tree
        moves, internal, splittable, nog = self._move_sets(tree)
        if not moves:
            return lm, False
        move = moves[int(self.rng.integers(len(moves)))]
        sp = self.split_prior.probs
        extra = 0.0
        if move == "grow":
            path, node, _ = splittable[int(self.rng.integers(len(splittable)))]
            w = sp[node.lo:node.hi] / sp[node.lo:node.hi].sum()
            j = int(self.rng.choice(w.size, p=w))
            s = node.lo + j
            new = TimeNode(node.lo, node.hi, s,
                           TimeNode(node.lo, s, exposure=self._draw_exposure(node.lo, s)),
                           TimeNode(s + 1, node.hi, exposure=self._draw_exposure(s + 1, node.hi)))
            new_tree = tree.replace(path, new)
            moves2, _, _, nog2 = self._move_sets(new_tree)
            log_q = (-math.log(len(moves2)) - math.log(len(nog2))
                     + math.log(len(moves)) + math.log(len(splittable)) - math.log(w[j]))
        elif move == "prune":
            path, node, _ = nog[int(self.rng.integers(len(nog)))]
            new = TimeNode(node.lo, node.hi, exposure=self._draw_exposure(node.lo, node.hi))
            new_tree = tree.replace(path, new)
            moves2, _, split2, _ = self._move_sets(new_tree)
            w = sp[node.split] / sp[node.lo:node.hi].sum()
            log_q = (-math.log(len(moves2)) - math.log(len(split2)) + math.log(w)
                     + math.log(len(moves)) + math.log(len(nog)))
        else:
            path, node, _ = internal[int(self.rng.integers(len(internal)))]
            left = _subtree_splits(node.left)
            right = _subtree_splits(node.right)
            lo_ok = max(left) + 1 if left else node.lo
            hi_ok = min(right) - 1 if right else node.hi - 1
            s = lo_ok + int(self.rng.integers(hi_ok - lo_ok + 1))
            if s == node.split:
                self.accept["change"][0] += 1
                self.accept["change"][1] += 1
                return lm, False
            new = relabel_subtree(node, node.lo, node.hi, split=s)
            new_tree = tree.replace(path, new)
            log_q = 0.0
            old_terms = [t for t in _leaves(node)]
            new_terms = [t for t in _leaves(new)]
            extra = (sum(self._log_exp_prior(t) for t in new_terms)
                     - sum(self._log_exp_prior(t) for t in old_terms))

        reuse = {(id(t.exposure), t.lo, t.hi): blk for t, blk in zip(u.terms, u.blocks)}
        new_blocks = [reuse.get((id(t.exposure), t.lo, t.hi))
                      if (id(t.exposure), t.lo, t.hi) in reuse
                      else self.basis.block(t.exposure.split_indices(), t.lo, t.hi)
                      for t in new_tree.terminals()]
        lm_new = self._lm(new_blocks, ctx)
        log_r = (lm_new - lm + self._log_time_prior(new_tree) - self._log_time_prior(tree)
                 + extra + log_q)
        self.accept[move][1] += 1
        if math.log(max(self.rng.random(), 1e-300)) < log_r:
            self.accept[move][0] += 1
            theta_of = {id(t.exposure): th for t, th in zip(u.terms, u.theta)}
            u.set_tree(new_tree, self.basis, reuse)
            u.theta = [theta_of.get(id(t.exposure), np.zeros(b.shape[0]))
                       for t, b in zip(u.terms, u.blocks)]
            return lm_new, True
        return lm, False

    def _exposure_move(self, u: _Unit, b: int, ctx: _Ctx, lm: float):
        term = u.terms[b]
        prop = self._draw_exposure(term.lo, term.hi)
        self.accept["exposure"][1] += 1
        if prop.split_indices() == term.exposure.split_indices():
            # same partition: identical collapsed likelihood under shared uniforms
            self.accept["exposure"][0] += 1
            return lm, False
        blk = self.basis.block(prop.split_indices(), term.lo, term.hi)
        blocks = u.blocks[:b] + [blk] + u.blocks[b + 1:]
        lm_new = self._lm(blocks, ctx)
        if math.log(max(self.rng.random(), 1e-300)) < lm_new - lm:
            self.accept["exposure"][0] += 1
            new_tree = u.tree.replace(u.paths[b], TimeNode(term.lo, term.hi, exposure=prop))
            u.tree = new_tree
            u.terms = new_tree.terminals()
            u.blocks = blocks
            u.theta[b] = np.zeros(blk.shape[0])
            return lm_new, True
        return lm, False

    def _draw_theta(self, u: _Unit, ctx: _Ctx, changed: bool):
        old_fit = u.fit
        q = u.n_free
        if q == 0:
            u.theta = [np.zeros(0) for _ in u.blocks]
            u.fit = np.zeros(self.n)
        else:
            W = u.design()
            tc = theta_conditional(W, ctx.R, self.proj, self.hyper.nu)
            init = None if changed else np.concatenate(u.theta)
            s2 = self.hyper.sigma ** 2
            theta = sample_tmvn_nonneg_prec(tc.mean, tc.prec_unscaled / s2, self.rng,
                                            self.cfg.tmvn_sweeps, init)
            out, i = [], 0
            for blk in u.blocks:
                k = blk.shape[0]
                out.append(theta[i:i + k])
                i += k
            u.theta = out
            u.fit = theta @ W
        self.f += u.fit - old_fit

    def _update_unit(self, a: int):
        u = self.units[a]
        R = self.y - (self.f - u.fit)
        rq = 0.0 if self.constant_likelihood else float(R @ self.proj.apply(R))
        ctx = _Ctx(R, rq, _CRN(self.rng, self.half))
        lm = self._lm(u.blocks, ctx)
        changed = False
        if not u.fixed and self.L > 0:
            lm, changed = self._time_move(u, ctx, lm)
        for b in range(len(u.terms)):
            lm, ch = self._exposure_move(u, b, ctx, lm)
            changed |= ch
        self._draw_theta(u, ctx, changed)

    # ------------------------------------------------------ hyper updates

    def _update_gamma(self):
        rows, hits = [], []
        for u in self.units:
            for t in u.terms:
                r = np.zeros(self.L + 1)
                r[t.lo:t.hi + 1] = 1.0 / t.size
                rows.append(r)
                hits.append(1.0 if t.exposure.n_bins > 1 else 0.0)
        X = np.array(rows)
        e = np.array(hits)
        omega = sample_polya_gamma(np.ones(e.size), X @ self.hyper.gamma, self.rng)
        prec = X.T @ (X * omega[:, None]) + np.diag(1.0 / self.gamma_var)
        num = X.T @ (e - 0.5) + self.gamma_mean / self.gamma_var
        self._set_gamma(sample_mvn_prec(num, prec, self.rng))

    def _update_split_prior(self):
        if self.L == 0 or self.cfg.fixed_split_probs:
            return
        counts = np.zeros(self.L)
        for u in self.units:
            if not u.fixed:
                for s in u.tree.internal_splits():
                    counts[s] += 1
        self.split_prior = update_split_location_prior(counts, self.split_prior, self.rng)
        self.hyper.split_probs = self.split_prior.probs
        self.hyper.kappa = self.split_prior.kappa

    def _theta_sumsq(self):
        th = [t for u in self.units for t in u.theta if t.size]
        if not th:
            return 0.0, 0
        allth = np.concatenate(th)
        return float(allth @ allth), allth.size

    def _update_variances_and_zeta(self):
        h = self.hyper
        ss, count = self._theta_sumsq()
        r = self.y - self.f
        if self.gaussian:
            if self.constant_likelihood:
                quad, nobs = 0.0, 0
            else:
                quad, nobs = float(r @ self.proj.apply(r)), self.n
            s2, h.sigma_aux = update_halfcauchy_variance(quad + ss / h.nu**2, nobs + count,
                                                         h.sigma_aux, self.rng)
            h.sigma = math.sqrt(s2)
        nu2, h.nu_aux = update_halfcauchy_variance(ss / h.sigma**2, count, h.nu_aux, self.rng)
        h.nu = math.sqrt(nu2)
        cov = h.sigma**2 * self.proj.V_zeta
        p = cov.shape[0]
        if p:
            h.zeta = self.proj.zeta_mean(r) + np.linalg.cholesky(cov) @ self.rng.standard_normal(p)

    def _update_binomial_augmentation(self):
        h = self.hyper
        psi_lin = self.f + self.data.covariates @ h.zeta
        omega = sample_polya_gamma(self.trials, psi_lin, self.rng)
        omega = np.maximum(omega, 1e-10)
        h.omega = omega
        self.weights = omega
        self.y = self.kappa_obs / omega
        self.proj = build_projection(self.data.covariates, self.cfg.ridge_scale, omega)

    def step(self):
        self.iteration += 1
        for a in range(len(self.units)):
            self._update_unit(a)
        self._update_gamma()
        self._update_split_prior()
        self._update_variances_and_zeta()
        if not self.gaussian:
            self._update_binomial_augmentation()
        if self.cfg.check_every and self.iteration % self.cfg.check_every == 0:
            self.check_fit()

    # ------------------------------------------------------------ outputs

    def ensemble(self) -> Ensemble:
        units = []
        for a, u in enumerate(self.units):
            trees = [t.exposure.with_increments(th) for t, th in zip(u.terms, u.theta)]
            units.append(NestedTreeUnit(u.tree.with_exposures(trees), a))
        return Ensemble(tuple(units), self.hyper)

    def recompute_fit(self) -> np.ndarray:
        f = np.zeros(self.n)
        for u in self.units:
            for t, th in zip(u.terms, u.theta):
                if th.size:
                    f += th @ self.basis.block(t.exposure.split_indices(), t.lo, t.hi)
        return f

    def check_fit(self, tol: float = 1e-8):
        f = self.recompute_fit()
        err = float(np.max(np.abs(f - self.f))) if self.n else 0.0
        if err > tol:
            raise NumericalError(f"cached fit drifted by {err:.3g} at iteration {self.iteration}")
        self.f = f
        for u in self.units:
            for th in u.theta:
                if np.any(th < 0):
                    raise NumericalError("negative increment in chain state")

    def surface(self) -> np.ndarray:
        gx = self.grid_x
        gl = self.grid_l
        out = np.zeros((gx.size, gl.size))
        for u in self.units:
            for t, th in zip(u.terms, u.theta):
                if not th.size:
                    continue
                mask = (gl >= t.lo) & (gl <= t.hi)
                if not mask.any():
                    continue
                s = self.grid[t.exposure.split_indices()]
                out[:, mask] += (ndtr((gx[:, None] - s) / self.sigma_x) @ th)[:, None]
        return out * self.y_scale

    def effect_lags(self) -> np.ndarray:
        e = np.zeros(self.L + 1, dtype=bool)
        for u in self.units:
            for t in u.terms:
                if t.exposure.n_bins > 1:
                    e[t.lo:t.hi + 1] = True
        return e

    def snapshot(self) -> PosteriorDraw:
        h = self.hyper
        bins = [t.exposure.n_bins for u in self.units for t in u.terms]
        return PosteriorDraw(
            iteration=self.iteration,
            surface=self.surface(),
            effect_lags=self.effect_lags(),
            sigma=h.sigma * self.y_scale,
            nu=h.nu,
            gamma=h.gamma.copy(),
            kappa=h.kappa,
            time_terminals=np.array([len(u.terms) for u in self.units]),
            exposure_terminals=float(np.mean(bins)),
            zeta=h.zeta.copy(),
        )

    def run(self, callback=None) -> ChainResult:
        cfg = self.cfg
        draws = []
        traces = {"sigma": [], "nu": [], "mean_time_terminals": [], "mean_exposure_terminals": []}
        violations = 0
        t0 = time.perf_counter()
        for it in range(1, cfg.iterations + 1):
            self.step()
            traces["sigma"].append(self.hyper.sigma * self.y_scale)
            traces["nu"].append(self.hyper.nu)
            traces["mean_time_terminals"].append(float(np.mean([len(u.terms) for u in self.units])))
            traces["mean_exposure_terminals"].append(
                float(np.mean([t.exposure.n_bins for u in self.units for t in u.terms])))
            if it > cfg.burn_in and (it - cfg.burn_in) % cfg.thinning == 0:
                d = self.snapshot()
                if d.surface.shape[0] > 1 and np.any(np.diff(d.surface, axis=0) < -1e-10):
                    violations += 1
                draws.append(d)
            if callback is not None:
                callback(self, it)
        acc = {k: (v[0] / v[1] if v[1] else float("nan")) for k, v in self.accept.items()}
        return ChainResult(self.chain_id, draws, self.grid_x, self.grid_l, acc, traces,
                           time.perf_counter() - t0, cfg.seed, violations)


def _subtree_splits(node: TimeNode) -> list[int]:
    if node.is_leaf:
        return []
    return _subtree_splits(node.left) + [node.split] + _subtree_splits(node.right)


def _leaves(node: TimeNode):
    if node.is_leaf:
        yield node
    else:
        yield from _leaves(node.left)
        yield from _leaves(node.right)


def selection_prior_arrays(cfg: ModelConfig, L: int):
    if cfg.gamma_prior_intervals is not None:
        if len(cfg.gamma_prior_intervals) != L + 1:
            raise ConfigError(f"gamma_prior_intervals needs {L + 1} entries")
        sp = selection_prior_from_intervals(cfg.gamma_prior_intervals)
        return sp.mean.astype(float), sp.var.astype(float)
    mean = np.zeros(L + 1) if cfg.gamma_prior_mean is None else np.asarray(cfg.gamma_prior_mean, float)
    var = DEFAULT_SELECTION_VAR if cfg.gamma_prior_var is None else cfg.gamma_prior_var
    var = np.broadcast_to(np.asarray(var, dtype=float), (L + 1,)).copy() if np.ndim(var) == 0 \
        else np.asarray(var, dtype=float)
    if mean.shape != (L + 1,) or var.shape != (L + 1,):
        raise ConfigError(f"selection prior mean/variance need {L + 1} entries")
    return mean, var


# --------------------------------------------------------- orchestration

def run_chain(data: LaggedDataset, config: ModelConfig, chain_id: int = 0, *,
              constant_likelihood: bool = False) -> ChainResult:
    return Chain(data, config, chain_id, constant_likelihood=constant_likelihood).run()


def _run_chain_job(args):
    data, config, chain_id, const = args
    return run_chain(data, config, chain_id, constant_likelihood=const)


def run_chains(data: LaggedDataset, config: ModelConfig, threads: int = 1, *,
               constant_likelihood: bool = False) -> list[ChainResult]:
    """Run ``config.chains`` independent chains, in worker processes when ``threads > 1``."""
    jobs = [(data, config, c, constant_likelihood) for c in range(config.chains)]
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(threads, len(jobs))) as pool:
            return list(pool.map(_run_chain_job, jobs))
    return [_run_chain_job(j) for j in jobs]
