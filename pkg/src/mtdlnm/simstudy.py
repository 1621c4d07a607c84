"""Simulation study: truth surfaces, synthetic outcomes and accuracy metrics."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import LaggedDataset, ModelConfig, ModelError
from .inference import SurfaceSummary, SusceptibilityProfile, gelman_rubin, summarize_surface, susceptibility
from .priors import informative_selection_intervals, informative_split_weights
from .samplers import make_rng

FX_KINDS = ("linear", "sublinear", "exponential")
FL_KINDS = ("piecewise", "linear", "quadratic")
THRESHOLD = 25.0
EVAL_GRID_X = np.arange(3, 31, dtype=float)
EVAL_GRID_L = np.arange(0, 21)
EFFECT_LAGS = {"piecewise": tuple(range(0, 4)), "linear": tuple(range(0, 6)),
               "quadratic": tuple(range(0, 8))}


def truth_fx(kind: str, x):
    """Exposure shape; zero at and below the threshold of 25.

    The sublinear branch is ``0.2 log(x - 25)`` from 26 up and held at zero
    on (25, 26] so the curve starts at zero and never dips negative.
    """
    x = np.asarray(x, dtype=float)
    d = x - THRESHOLD
    above = d > 0
    if kind == "linear":
        out = 0.1 * d
    elif kind == "sublinear":
        out = 0.2 * np.log(np.maximum(d, 1.0))
    elif kind == "exponential":
        out = 0.2 * np.expm1(0.25 * np.where(above, d, 0.0))
    else:
        raise ValueError(f"unknown exposure shape {kind!r}")
    res = np.where(above, out, 0.0)
    return float(res) if res.ndim == 0 else res


def truth_fl(kind: str, l):
    """Lag shape. The quadratic form is cut to zero beyond lag 8."""
    l = np.asarray(l, dtype=float)
    if kind == "piecewise":
        out = np.where(l < 4, 20.0, 0.0)
    elif kind == "linear":
        out = np.maximum(0.0, 6.0 * (6.0 - l))
    elif kind == "quadratic":
        out = np.where(l <= 8, 0.2 * (l + 1) * (l - 8) ** 2, 0.0)
    else:
        raise ValueError(f"unknown lag shape {kind!r}")
    return float(out) if out.ndim == 0 else out


def truth_surface(fx_kind: str, fl_kind: str, grid_x=EVAL_GRID_X, grid_l=EVAL_GRID_L) -> np.ndarray:
    return np.outer(truth_fx(fx_kind, grid_x), truth_fl(fl_kind, grid_l))


# ------------------------------------------------------ exposure library

@dataclass(frozen=True, eq=False)
class ExposureLibrary:
    """Daily exposure series split into seasons; lag windows never cross seasons."""

    seasons: tuple

    @property
    def values(self) -> np.ndarray:
        return np.concatenate(self.seasons)

    def window_count(self, L: int) -> int:
        return sum(max(0, len(s) - L) for s in self.seasons)

    def sample_windows(self, n: int, L: int, rng) -> np.ndarray:
        """``n`` lag windows drawn uniformly with replacement; column ``l`` is lag ``l``."""
        starts = [(i, t) for i, s in enumerate(self.seasons) for t in range(L, len(s))]
        if not starts:
            raise ModelError(f"exposure library has no complete windows of {L + 1} days")
        pick = rng.integers(len(starts), size=n)
        out = np.empty((n, L + 1))
        for r, j in enumerate(pick):
            i, t = starts[j]
            out[r] = self.seasons[i][t - L:t + 1][::-1]
        return out


def synthetic_exposure_library(seasons: int = 20, days: int = 122, mean: float = 22.0,
                               sd: float = 5.0, phi: float = 0.7, seed: int = 2024) -> ExposureLibrary:
    """Summer-temperature-like series: a seasonal hump plus AR(1) noise, rescaled.

    Pooled values are affinely rescaled to exactly the requested mean and sd.
    """
    rng = make_rng(seed, 11)
    t = np.arange(days)
    hump = 4.0 * np.sin(np.pi * (t + 0.5) / days)
    raw = []
    for _ in range(seasons):
        e = np.empty(days)
        e[0] = rng.standard_normal() / math.sqrt(1 - phi**2)
        for k in range(1, days):
            e[k] = phi * e[k - 1] + rng.standard_normal()
        raw.append(hump + 2.0 * e)
    pooled = np.concatenate(raw)
    a = sd / pooled.std()
    b = mean - a * pooled.mean()
    return ExposureLibrary(tuple(a * s + b for s in raw))


def exposure_library_from_series(values, season_ids=None) -> ExposureLibrary:
    values = np.asarray(values, dtype=float)
    if season_ids is None:
        return ExposureLibrary((values,))
    season_ids = np.asarray(season_ids)
    return ExposureLibrary(tuple(values[season_ids == s] for s in np.unique(season_ids)))


# -------------------------------------------------------------- scenarios

@dataclass(frozen=True)
class Scenario:
    fx_kind: str = "linear"
    fl_kind: str = "piecewise"
    noise_factor: float = 2.0
    n: int = 1000
    L: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.fx_kind not in FX_KINDS:
            raise ValueError(f"fx_kind must be one of {FX_KINDS}")
        if self.fl_kind not in FL_KINDS:
            raise ValueError(f"fl_kind must be one of {FL_KINDS}")
        if not self.noise_factor >= 0:
            raise ValueError("noise_factor must be nonnegative")
        if self.n < 1 or self.L < 0:
            raise ValueError("need n >= 1 and L >= 0")

    @property
    def effect_lags(self) -> tuple:
        return tuple(l for l in EFFECT_LAGS[self.fl_kind] if l <= self.L)

    @property
    def label(self) -> str:
        return f"{self.fx_kind}/{self.fl_kind}/x{self.noise_factor:g}"


def simulate_outcome(scenario: Scenario, library: ExposureLibrary, rng,
                     grid_x=EVAL_GRID_X, grid_l=None):
    """Draw one synthetic dataset; returns ``(dataset, truth surface, signal)``."""
    L = scenario.L
    if library.window_count(L) < 1:
        raise ModelError("exposure library is too short for the lag window")
    X = library.sample_windows(scenario.n, L, rng)
    signal = truth_fx(scenario.fx_kind, X) @ truth_fl(scenario.fl_kind, np.arange(L + 1))
    sd = float(np.std(signal))
    y = signal + scenario.noise_factor * sd * rng.standard_normal(scenario.n)
    data = LaggedDataset(y, X, np.ones((scenario.n, 1)), L)
    gl = np.arange(L + 1) if grid_l is None else np.asarray(grid_l)
    return data, truth_surface(scenario.fx_kind, scenario.fl_kind, grid_x, gl), signal


def scenario_config(scenario: Scenario, base: ModelConfig | None = None, *,
                    informative: bool = False, sigma_x: float | None = None) -> ModelConfig:
    """Model settings used in the study: evaluation grid, optional informative priors."""
    base = base or ModelConfig()
    changes = dict(grid_x=list(EVAL_GRID_X), grid_l=list(range(scenario.L + 1)))
    if sigma_x is not None:
        changes["sigma_x"] = sigma_x
    if informative:
        eff = scenario.effect_lags
        changes["gamma_prior_intervals"] = informative_selection_intervals(scenario.L, eff)
        changes["dirichlet_weights"] = list(informative_split_weights(scenario.L, eff))
    return base.replace(**changes)


# ---------------------------------------------------------------- metrics

@dataclass
class MetricsReport:
    """Accuracy of one fit, or an aggregate over replicates."""

    rmse: float
    coverage: float
    ci_width: float
    precision: float
    precision_vacuous: bool = False
    replicates: int = 1
    squared_error: np.ndarray | None = field(default=None, repr=False)
    covered: np.ndarray | None = field(default=None, repr=False)
    declared_lags: tuple = ()
    median_rhat: float | None = None
    retained_draws: int = 0
    monotone_violations: int = 0

    def row(self) -> dict:
        out = {k: v for k, v in asdict(self).items() if k not in ("squared_error", "covered")}
        out["declared_lags"] = " ".join(str(l) for l in self.declared_lags)
        return out


def evaluate_metrics(summary: SurfaceSummary, profile: SusceptibilityProfile, truth,
                     effect_lags) -> MetricsReport:
    truth = np.asarray(truth, dtype=float)
    if summary.mean.shape != truth.shape:
        raise ModelError(f"grid mismatch: estimate {summary.mean.shape} vs truth {truth.shape}")
    sq = (summary.mean - truth) ** 2
    covered = (summary.lower <= truth) & (truth <= summary.upper)
    declared = tuple(int(l) for l in profile.declared)
    eff = set(int(l) for l in effect_lags)
    if declared:
        precision = sum(l in eff for l in declared) / len(declared)
        vacuous = False
    else:
        precision, vacuous = 1.0, True
    return MetricsReport(float(np.sqrt(sq.mean())), float(covered.mean()),
                         float(summary.width.mean()), float(precision), vacuous, 1,
                         sq, covered, declared)


def aggregate_metrics(reports) -> MetricsReport:
    """RMSE per grid point across replicates, then averaged over the grid."""
    reports = list(reports)
    if not reports:
        raise ModelError("no replicate reports")
    sq = np.stack([r.squared_error for r in reports])
    cov = np.stack([r.covered for r in reports])
    rh = [r.median_rhat for r in reports if r.median_rhat is not None]
    return MetricsReport(
        rmse=float(np.sqrt(sq.mean(axis=0)).mean()),
        coverage=float(cov.mean()),
        ci_width=float(np.mean([r.ci_width for r in reports])),
        precision=float(np.mean([r.precision for r in reports])),
        precision_vacuous=any(r.precision_vacuous for r in reports),
        replicates=len(reports),
        # worst per-replicate median R-hat
        median_rhat=float(np.max(rh)) if rh else None,
        retained_draws=sum(r.retained_draws for r in reports),
        monotone_violations=sum(r.monotone_violations for r in reports),
    )


def fit_replicate(scenario: Scenario, config: ModelConfig, library: ExposureLibrary, *,
                  threads: int = 1, widen: float = 0.05, threshold: float = 0.95):
    """Simulate, fit all chains and score one replicate."""
    from .mcmc import run_chains

    rng = make_rng(scenario.seed, 7)
    data, truth, _ = simulate_outcome(scenario, library, rng, np.asarray(config.grid_x, dtype=float),
                                      np.asarray(config.grid_l, dtype=int))
    results = run_chains(data, config, threads=threads)
    draws = [d for r in results for d in r.draws]
    summary = summarize_surface(draws, 0.95, widen, grid_x=config.grid_x, grid_l=config.grid_l)
    profile = susceptibility(draws, threshold)
    report = evaluate_metrics(summary, profile, truth, scenario.effect_lags)
    report.retained_draws = len(draws)
    report.monotone_violations = sum(r.monotone_violations for r in results)
    if len(results) > 1 and len(results[0].draws) >= 10:
        report.median_rhat = gelman_rubin([r.draws for r in results])[0]
    return report, results


def run_study(scenario: Scenario, config: ModelConfig, replicates: int, library=None, *,
              threads: int = 1, widen: float = 0.05, threshold: float = 0.95, progress=None):
    """Replicates use seeds ``scenario.seed + r`` for data and model alike."""
    library = library or synthetic_exposure_library()
    reports = []
    for r in range(replicates):
        sc = Scenario(scenario.fx_kind, scenario.fl_kind, scenario.noise_factor, scenario.n,
                      scenario.L, scenario.seed + r)
        rep, _ = fit_replicate(sc, config.replace(seed=sc.seed), library, threads=threads,
                               widen=widen, threshold=threshold)
        reports.append(rep)
        if progress:
            progress(r, rep)
    return aggregate_metrics(reports), reports
