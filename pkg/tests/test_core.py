import numpy as np
import pytest
from hypothesis import given, strategies as st

from mtdlnm.core import (
    AlignmentError, ConfigError, ConstraintViolationError, EmptyDatasetError, ExposureTree,
    LEAF, LaggedDataset, ModelConfig, TimeNode, TimeTree, build_lagged_design,
    delta_from_theta, difference_matrix, exposure_tree_from_splits, ordered_exposure_bins,
    relabel_subtree, terminal_lag_sets, theta_from_delta,
)


def test_lagged_design_orders_lags_and_drops_incomplete_rows():
    x = np.arange(10.0)
    y = np.arange(10.0) * 2
    d = build_lagged_design(x, y, L=3)
    assert d.n == 7
    np.testing.assert_array_equal(d.exposures[0], [3, 2, 1, 0])
    np.testing.assert_array_equal(d.outcomes, y[3:])
    np.testing.assert_array_equal(d.time_index, np.arange(3, 10))
    assert d.covariates.shape == (7, 1)


def test_lagged_design_drops_missing_windows():
    x = np.arange(12.0)
    x[5] = np.nan
    d = build_lagged_design(x, np.ones(12), L=2)
    # windows ending at 5, 6, 7 include the gap
    np.testing.assert_array_equal(d.time_index, [2, 3, 4, 8, 9, 10, 11])


def test_lagged_design_errors():
    with pytest.raises(AlignmentError):
        build_lagged_design(np.ones(5), np.ones(4), L=1)
    with pytest.raises(EmptyDatasetError):
        build_lagged_design(np.ones(3), np.ones(3), L=3)
    with pytest.raises(EmptyDatasetError):
        build_lagged_design(np.full(6, np.nan), np.ones(6), L=1)


def test_dataset_validation():
    with pytest.raises(Exception):
        LaggedDataset(np.ones(3), np.ones((3, 2)), np.ones((3, 1)), 3)


def test_difference_matrix_inverts_cumsum():
    D = difference_matrix(4)
    delta = np.array([0.0, 1.0, 1.5, 4.0])
    np.testing.assert_allclose(D @ delta, [0, 1, 0.5, 2.5])


@given(st.lists(st.floats(0, 10), min_size=0, max_size=6))
def test_theta_delta_round_trip(incs):
    theta = np.concatenate([[0.0], incs])
    delta = delta_from_theta(theta)
    assert np.all(np.diff(delta) >= 0)
    np.testing.assert_allclose(theta_from_delta(delta), theta, atol=1e-12)


def test_delta_from_theta_rejects_bad_increments():
    with pytest.raises(ConstraintViolationError):
        delta_from_theta([0.0, -1.0])
    with pytest.raises(ConstraintViolationError):
        delta_from_theta([1.0, 2.0])


def test_exposure_tree_bins_are_ordered_and_cover_the_line():
    tree = exposure_tree_from_splits([(5, 25.0), (2, 20.0), (8, 30.0)], [1.0, 2.0, 0.5])
    bins = ordered_exposure_bins(tree)
    assert bins[0][0] == -np.inf and bins[-1][1] == np.inf
    assert [b[1] for b in bins[:-1]] == [20.0, 25.0, 30.0]
    assert tree.n_bins == 4
    np.testing.assert_allclose(tree.delta, [0, 1, 3, 3.5])


def test_exposure_tree_rejects_wrong_increment_count():
    with pytest.raises(Exception):
        ExposureTree(LEAF, np.zeros(2))


def test_time_tree_terminals_partition_lags():
    tree = TimeTree.from_splits(6, [2, 4])
    sets = terminal_lag_sets(tree)
    assert sets == [(0, 2), (3, 4), (5, 6)]
    assert tree.internal_splits() == sorted(tree.internal_splits())
    assert tree.n_terminals == 3


def test_time_tree_replace_and_relabel():
    tree = TimeTree.from_splits(6, [3, 4])
    right = tree.root.right
    new = tree.replace((1,), relabel_subtree(right, right.lo, right.hi, split=5))
    assert terminal_lag_sets(new) == [(0, 3), (4, 5), (6, 6)]
    assert terminal_lag_sets(tree) == [(0, 3), (4, 4), (5, 6)]
    # exposure trees ride along with their terminals
    assert new.terminals()[0].exposure is tree.terminals()[0].exposure


def test_time_node_validates_split_range():
    with pytest.raises(Exception):
        TimeNode(0, 3, 3, TimeNode(0, 3), TimeNode(4, 3))


def test_config_round_trip_and_unknown_keys():
    cfg = ModelConfig(iterations=50, burn_in=10)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError, match="unknown"):
        ModelConfig.from_dict({"iterations": 10, "burnin": 2})


@pytest.mark.parametrize("bad", [dict(burn_in=7000), dict(thinning=0), dict(alpha_T=1.0),
                                 dict(outcome_family="poisson"), dict(kappa_mode="free"),
                                 dict(gamma_prior_var=[1.0, -1.0]), dict(sigma_x=0.0)])
def test_config_rejects_invalid_values(bad):
    with pytest.raises(ConfigError):
        ModelConfig(**bad)
