import math

import numpy as np
import pytest
from scipy import integrate, stats
from scipy.special import expit, logit

from mtdlnm.core import (
    ExposureTree, LaggedDataset, ModelConfig, RankDeficiencyError, TimeNode, build_lagged_design,
    exposure_tree_from_splits,
)
from mtdlnm.mcmc import (
    Chain, NumericalError, build_projection, log_marginal, log_marginal_from_design, run_chains,
    sample_theta_block, selection_prior_arrays, theta_conditional,
)
from mtdlnm.samplers import make_rng
from mtdlnm.weights import ExposureBasis


def quick(**kw):
    base = dict(num_trees=3, iterations=40, burn_in=10, thinning=5, chains=2, seed=3)
    base.update(kw)
    return ModelConfig(**base)


# ----------------------------------------------------------- projection

def test_projection_centres_with_flat_intercept():
    Z = np.ones((6, 1))
    v = np.arange(6.0) ** 2
    proj = build_projection(Z, math.inf)
    np.testing.assert_allclose(proj.apply(v), v - v.mean(), atol=1e-12)


def test_projection_matches_dense_inverse():
    g = np.random.default_rng(1)
    Z = np.column_stack([np.ones(7), g.standard_normal(7)])
    c = 2.5
    V = np.eye(7) + c * Z @ Z.T
    proj = build_projection(Z, c)
    v = g.standard_normal((3, 7))
    np.testing.assert_allclose(proj.apply(v), v @ np.linalg.inv(V), atol=1e-10)
    assert proj.logdet_VZ == pytest.approx(np.linalg.slogdet(V)[1])


def test_weighted_projection_matches_dense_inverse():
    g = np.random.default_rng(2)
    Z = np.column_stack([np.ones(5), g.standard_normal(5)])
    w = g.uniform(0.5, 2.0, 5)
    c = 0.7
    V = np.diag(1 / w) + c * Z @ Z.T
    proj = build_projection(Z, c, w)
    v = g.standard_normal(5)
    np.testing.assert_allclose(proj.apply(v), np.linalg.solve(V, v), atol=1e-10)
    assert proj.logdet_VZ == pytest.approx(np.linalg.slogdet(V)[1])


def test_projection_vanishing_ridge_is_identity():
    Z = np.ones((4, 1))
    v = np.array([1.0, -2.0, 0.5, 3.0])
    np.testing.assert_allclose(build_projection(Z, 1e-12).apply(v), v, atol=1e-10)


def test_projection_reports_dependent_columns():
    Z = np.column_stack([np.ones(5), np.arange(5.0), 2 * np.arange(5.0) + 1])
    with pytest.raises(RankDeficiencyError, match="dependent columns"):
        build_projection(Z, 1e6)


# --------------------------------------------------- collapsed likelihood

def _setup(n, q, seed):
    g = np.random.default_rng(seed)
    Z = np.ones((n, 1))
    W = g.uniform(0, 2, (q, n))
    R = W.T @ np.full(q, 0.4) + 0.3 * g.standard_normal(n)
    c = 1.5
    return W, R, Z, c, np.eye(n) + c * Z @ Z.T


def _quadrature(W, R, cov, sigma, nu):
    q = W.shape[0]
    mvn = stats.multivariate_normal(np.zeros(R.size), cov * sigma**2)
    s = sigma * nu
    off = mvn.logpdf(R)

    def f(*theta):
        th = np.array(theta[::-1])
        lp = mvn.logpdf(R - W.T @ th) + q * math.log(2) + stats.norm.logpdf(th, 0, s).sum()
        return math.exp(lp - off)

    if q == 1:
        val = integrate.quad(f, 0, 12 * s, epsabs=0, epsrel=1e-10)[0]
    else:
        val = integrate.dblquad(f, 0, 12 * s, 0, 12 * s, epsabs=0, epsrel=1e-9)[0]
    return off + math.log(val)


def test_log_marginal_without_increments_is_gaussian_density():
    W, R, Z, c, V = _setup(6, 0, 4)
    proj = build_projection(Z, c)
    want = stats.multivariate_normal(np.zeros(6), 0.49 * V).logpdf(R)
    assert log_marginal_from_design(W, R, proj, 0.7, 1.0) == pytest.approx(want, rel=1e-12)


@pytest.mark.parametrize("n,seed", [(4, 5), (8, 6)])
@pytest.mark.parametrize("nu", [0.3, 1.0])
def test_log_marginal_one_increment_matches_quadrature(n, seed, nu):
    W, R, Z, c, V = _setup(n, 1, seed)
    proj = build_projection(Z, c)
    got = log_marginal_from_design(W, R, proj, 0.6, nu)
    assert got == pytest.approx(_quadrature(W, R, V, 0.6, nu), abs=1e-6)


@pytest.mark.parametrize("n,seed", [(5, 7), (8, 8)])
def test_log_marginal_two_increments_matches_quadrature(n, seed):
    W, R, Z, c, V = _setup(n, 2, seed)
    proj = build_projection(Z, c)
    got = log_marginal_from_design(W, R, proj, 0.8, 0.7)
    want = _quadrature(W, R, V, 0.8, 0.7)
    assert abs(math.expm1(got - want)) < 1e-2


def test_log_marginal_uses_unit_design(small_data):
    basis = ExposureBasis(small_data.exposures, np.array([20.0, 25.0]), 0.5)
    tree = ExposureTree(exposure_tree_from_splits([(1, 25.0)]).root, np.zeros(1))
    from mtdlnm.core import NestedTreeUnit, TimeTree
    unit = NestedTreeUnit(TimeTree.from_splits(4, [1]).with_exposures([tree, ExposureTree()]))
    proj = build_projection(small_data.covariates, 1e6)
    W = basis.block([1], 0, 1)
    a = log_marginal(small_data.outcomes, unit, basis, proj, 1.0, 1.0)
    b = log_marginal_from_design(W, small_data.outcomes, proj, 1.0, 1.0)
    assert a == pytest.approx(b, rel=1e-12)


def test_theta_conditional_univariate_formula():
    W, R, Z, c, V = _setup(6, 1, 9)
    proj = build_projection(Z, c)
    Vi = np.linalg.inv(V)
    w = W[0]
    P = w @ Vi @ w + 1 / 0.5**2
    tc = theta_conditional(W, R, proj, 0.5)
    assert tc.prec_unscaled[0, 0] == pytest.approx(P)
    assert tc.mean[0] == pytest.approx(w @ Vi @ R / P)


def test_sample_theta_univariate_is_truncated_normal(small_data):
    basis = ExposureBasis(small_data.exposures, np.array([25.0]), 0.5)
    from mtdlnm.core import NestedTreeUnit, TimeTree
    unit = NestedTreeUnit(TimeTree.stump(4, exposure_tree_from_splits([(0, 25.0)])))
    proj = build_projection(small_data.covariates, 1e6)
    R = small_data.outcomes - 3.0  # pushes the conditional mean toward the boundary
    sigma, nu = 2.0, 0.05
    tc = theta_conditional(basis.block([0], 0, 4), R, proj, nu)
    m, sd = tc.mean[0], sigma / math.sqrt(tc.prec_unscaled[0, 0])
    rng = make_rng(10)
    d = [sample_theta_block(unit, R, basis, proj, sigma, nu, rng).time_tree.exposure_trees()[0].increments[0]
         for _ in range(4000)]
    ref = stats.truncnorm(-m / sd, np.inf, loc=m, scale=sd)
    assert stats.kstest(d, ref.cdf).pvalue > 0.01


# ------------------------------------------------------------- the chain

def test_retained_draw_count_and_determinism(small_data):
    cfg = quick()
    a = run_chains(small_data, cfg)
    b = run_chains(small_data, cfg)
    assert [len(r.draws) for r in a] == [6, 6]
    for ra, rb in zip(a, b):
        for da, db in zip(ra.draws, rb.draws):
            np.testing.assert_array_equal(da.surface, db.surface)
            assert da.sigma == db.sigma
    assert not np.array_equal(a[0].draws[-1].surface, a[1].draws[-1].surface)


def test_parallel_chains_match_serial(small_data):
    cfg = quick(iterations=20, burn_in=10)
    s = run_chains(small_data, cfg)
    p = run_chains(small_data, cfg, threads=2)
    for rs, rp in zip(s, p):
        np.testing.assert_array_equal(rs.draws[-1].surface, rp.draws[-1].surface)


def test_retained_surfaces_are_monotone(small_data):
    res = run_chains(small_data, quick(iterations=60))
    assert all(r.monotone_violations == 0 for r in res)
    for r in res:
        for d in r.draws:
            assert np.all(np.diff(d.surface, axis=0) >= -1e-10)


def test_step_effect_located_near_threshold(small_data):
    res = run_chains(small_data, quick(iterations=200, burn_in=100, chains=1))
    mean = np.mean([d.surface for d in res[0].draws], axis=0)
    jump = np.diff(mean[:, 0])
    x = res[0].grid_x
    assert 24 <= x[np.argmax(jump)] <= 26
    assert mean[-1, 0] - mean[0, 0] == pytest.approx(3.0, abs=0.6)


def test_lag_change_point_found():
    g = np.random.default_rng(11)
    T, L = 500, 8
    x = 22 + 5 * g.standard_normal(T)
    X = np.lib.stride_tricks.sliding_window_view(x, L + 1)[:, ::-1]
    y = np.full(T, np.nan)
    y[L:] = 1.5 * (X[:, :4] > 25).sum(axis=1) + 0.5 * g.standard_normal(T - L)
    data = build_lagged_design(x, np.nan_to_num(y), L=L)
    chain = Chain(data, quick(iterations=1, burn_in=0, num_trees=5))
    counts = np.zeros(L)
    for it in range(250):
        chain.step()
        if it >= 100:
            for u in chain.units:
                for s in u.tree.internal_splits():
                    counts[s] += 1
    assert int(np.argmax(counts)) in (2, 3, 4)
    res = chain.effect_lags()
    assert res[:4].all()


def test_identical_exposure_proposal_always_accepted(small_data):
    chain = Chain(small_data, quick())
    chain._draw_exposure = lambda lo, hi: ExposureTree()

    def boom(*a, **k):
        raise AssertionError("likelihood should not be evaluated")

    chain._lm = boom
    u = chain.units[0]
    lm, changed = chain._exposure_move(u, 0, None, -12.5)
    assert (lm, changed) == (-12.5, False)
    assert chain.accept["exposure"] == [1, 1]


def test_check_fit_detects_drift(small_data):
    chain = Chain(small_data, quick())
    for _ in range(5):
        chain.step()
    chain.check_fit()
    chain.f = chain.f + 1e-3
    with pytest.raises(NumericalError, match="drifted"):
        chain.check_fit()


def test_gamma_update_matches_logistic_posterior(small_data):
    # single lag: the selection logit has a 1-d posterior computable by quadrature
    data = LaggedDataset(small_data.outcomes, small_data.exposures[:, :1], small_data.covariates, 0)
    chain = Chain(data, quick(num_trees=4, gamma_prior_mean=[0.5], gamma_prior_var=2.0))
    split = exposure_tree_from_splits([(3, float(chain.grid[3]))])
    for u, e in zip(chain.units, [split, split, split, ExposureTree()]):
        u.set_tree(u.tree.with_exposures([e]), chain.basis)
    draws = []
    for i in range(20_000):
        chain._update_gamma()
        draws.append(chain.hyper.gamma[0])
    draws = np.array(draws[500:])

    def post(g):
        return stats.norm.pdf(g, 0.5, math.sqrt(2)) * expit(g) ** 3 * expit(-g)

    Z = integrate.quad(post, -15, 15)[0]
    m = integrate.quad(lambda g: g * post(g), -15, 15)[0] / Z
    v = integrate.quad(lambda g: (g - m) ** 2 * post(g), -15, 15)[0] / Z
    assert draws.mean() == pytest.approx(m, abs=0.05)
    assert draws.var() == pytest.approx(v, rel=0.08)


def test_zeta_draws_centre_on_ridge_solution(small_data):
    g = np.random.default_rng(12)
    Z = np.column_stack([np.ones(small_data.n), g.standard_normal(small_data.n)])
    data = LaggedDataset(small_data.outcomes, small_data.exposures, Z, 4)
    chain = Chain(data, quick(ridge_scale=0.5))
    zs = []
    for _ in range(3000):
        chain._update_variances_and_zeta()
        zs.append(chain.hyper.zeta)
    want = np.linalg.solve(Z.T @ Z + np.eye(2) / 0.5, Z.T @ chain.y)
    np.testing.assert_allclose(np.mean(zs, axis=0), want, atol=0.01)


def test_binomial_intercept_and_augmentation():
    g = np.random.default_rng(13)
    T = 300
    x = 22 + 5 * g.standard_normal(T)
    trials = np.full(T, 20)
    y = g.binomial(trials, 0.3)
    data = build_lagged_design(x, y, L=2, trial_counts=trials)
    chain = Chain(data, quick(outcome_family="binomial"))
    assert chain.hyper.omega == pytest.approx(np.full(data.n, 5.0))
    zs, om = [], []
    for it in range(150):
        chain.step()
        if it >= 50:
            zs.append(chain.hyper.zeta[0] + chain.f.mean())
            om.append(chain.hyper.omega.mean())
    assert np.mean(zs) == pytest.approx(logit(0.3), abs=0.1)
    # E[PG(20, psi)] = 10 tanh(psi/2)/psi at the fitted logit
    psi = logit(0.3)
    assert np.mean(om) == pytest.approx(10 * math.tanh(psi / 2) / psi, rel=0.03)


def test_binomial_requires_trials(small_data):
    from mtdlnm.core import ConfigError
    with pytest.raises(ConfigError):
        Chain(small_data, quick(outcome_family="binomial"))


def test_noise_level_recovered(small_data):
    # narrow bandwidth so the smoothed step can match the hard step in the data
    res = run_chains(small_data, quick(iterations=150, burn_in=50, chains=1, sigma_x=0.1))
    sig = np.mean([d.sigma for d in res[0].draws])
    assert sig == pytest.approx(0.5, rel=0.15)


def test_fixed_time_trees_are_kept(small_data):
    chain = Chain(small_data, quick(fixed_time_trees=[[1], [0, 2]]))
    for _ in range(10):
        chain.step()
    assert chain.units[0].tree.internal_splits() == [1]
    assert sorted(chain.units[1].tree.internal_splits()) == [0, 2]


def test_selection_prior_arrays_defaults():
    m, v = selection_prior_arrays(ModelConfig(), 3)
    np.testing.assert_array_equal(m, np.zeros(4))
    np.testing.assert_array_equal(v, np.full(4, 0.314))
    m, v = selection_prior_arrays(ModelConfig(gamma_prior_intervals=[(0.25, 0.75)] * 4), 3)
    np.testing.assert_allclose(v, 0.314, atol=0.01)
