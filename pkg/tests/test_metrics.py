import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ksivi.kernels import GaussianRBF, RieszSmoothed
from ksivi.metrics import (
    MetricRecord,
    SampleSet,
    box_truncate,
    correlation_matrix,
    ksd_metric,
    mmd_squared,
    mode_coverage,
    read_metric_csv,
    sliced_wasserstein,
    write_metric_csv,
)
from ksivi.targets import StandardNormal, eight_gaussians

finite = st.floats(-10, 10, allow_subnormal=False)


def test_mmd_examples():
    X = np.random.default_rng(0).normal(size=(30, 2))
    assert mmd_squared(X, X[::-1]) == 0.0
    assert mmd_squared([[0.0]], [[1.0]], GaussianRBF(1.0)) == pytest.approx(2 - 2 * np.exp(-0.5), abs=1e-15)
    assert mmd_squared([[0.0]], [[1.0]], GaussianRBF(1.0)) == pytest.approx(0.786939, abs=1e-6)
    Y = X + 0.5
    assert mmd_squared(X, Y) == mmd_squared(Y, X)


def test_mmd_errors():
    with pytest.raises(ValueError):
        mmd_squared(np.empty((0, 2)), np.ones((3, 2)))
    with pytest.raises(ValueError):
        mmd_squared(np.ones((3, 2)), np.ones((3, 3)))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (6, 2), elements=finite), arrays(np.float64, (5, 2), elements=finite))
def test_mmd_non_negative(X, Y):
    assert mmd_squared(X, Y) >= -1e-12


def test_sliced_wasserstein_examples():
    X = np.random.default_rng(1).normal(size=(40, 3))
    assert sliced_wasserstein(X, X, rng=0) == 0.0
    assert sliced_wasserstein([[0.0]], [[3.0]], rng=0) == pytest.approx(3.0, abs=1e-15)
    v = np.array([1.0, -2.0, 0.5])
    v /= np.linalg.norm(v)
    d1 = sliced_wasserstein(X, X + v, n_projections=512, rng=2)
    d2 = sliced_wasserstein(X, X + 2 * v, n_projections=512, rng=2)
    assert 0 < d1 < d2
    assert d2 == pytest.approx(2 * d1, rel=1e-12)


def test_sliced_wasserstein_subsamples_and_validates():
    rng = np.random.default_rng(3)
    assert sliced_wasserstein(rng.normal(size=(50, 2)), rng.normal(size=(20, 2)), rng=0) > 0
    with pytest.raises(ValueError):
        sliced_wasserstein(np.ones((3, 2)), np.ones((3, 2)), n_projections=0)
    with pytest.raises(ValueError):
        sliced_wasserstein(np.empty((0, 2)), np.ones((3, 2)))


@settings(max_examples=30, deadline=None)
@given(
    arrays(np.float64, (5, 2), elements=finite),
    arrays(np.float64, (5, 2), elements=finite),
    arrays(np.float64, (5, 2), elements=finite),
    st.integers(0, 2**16),
)
def test_sliced_wasserstein_pseudometric(X, Y, Z, seed):
    xy = sliced_wasserstein(X, Y, rng=seed)
    assert xy == sliced_wasserstein(Y, X, rng=seed)
    assert xy <= sliced_wasserstein(X, Z, rng=seed) + sliced_wasserstein(Z, Y, rng=seed) + 1e-9


def bootstrap_se(X, target, reps=30, n=1000, seed=0):
    rng = np.random.default_rng(seed)
    vals = [ksd_metric(X[rng.choice(len(X), n, replace=False)], target) for _ in range(reps)]
    # rescale the subsample spread to the full sample size
    return np.std(vals, ddof=1) * np.sqrt(n / len(X))


def test_ksd_metric_null_and_power():
    rng = np.random.default_rng(4)
    tgt = StandardNormal(2)
    X = rng.standard_normal((10_000, 2))
    assert abs(ksd_metric(X, tgt)) < 4 * bootstrap_se(X, tgt)
    Y = X + np.array([0.3, 0.0])
    assert ksd_metric(Y, tgt) > 4 * bootstrap_se(Y, tgt)


def test_ksd_metric_block_and_permutation():
    X = np.random.default_rng(5).normal(size=(300, 2)) * 1.3
    tgt = StandardNormal(2)
    a = ksd_metric(X, tgt)
    assert ksd_metric(X, tgt, block=7) == pytest.approx(a, rel=1e-12)
    perm = np.random.default_rng(6).permutation(300)
    assert ksd_metric(X[perm], tgt) == pytest.approx(a, rel=1e-12)


def test_ksd_metric_errors():
    with pytest.raises(ValueError):
        ksd_metric(np.ones((1, 2)), StandardNormal(2))
    with pytest.raises(ValueError):
        ksd_metric(np.random.default_rng(0).normal(size=(5, 2)), StandardNormal(2), RieszSmoothed())


def test_mode_coverage_examples():
    M = eight_gaussians().means
    np.testing.assert_allclose(mode_coverage(M, M, 0.1), 1 / 8)
    cov = mode_coverage(np.tile(M[2], (10, 1)), M, 0.1)
    np.testing.assert_array_equal(cov, np.eye(8)[2])
    assert mode_coverage(np.full((4, 2), 100.0), M, 3.0).sum() == 0.0
    X = eight_gaussians().sample(100_000, 0)
    cov = mode_coverage(X, M, 3.0)
    assert np.all((cov >= 0.115) & (cov <= 0.135))
    with pytest.raises(ValueError):
        mode_coverage(X, M, 0.0)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (8, 2), elements=finite), st.floats(0.1, 20))
def test_mode_coverage_is_a_sub_probability(X, radius):
    cov = mode_coverage(X, [[0.0, 0.0], [3.0, 3.0], [-4.0, 1.0]], radius)
    assert np.all(cov >= 0) and cov.sum() <= 1 + 1e-12


def test_box_truncate_examples():
    X = np.array([[1.0, 1.0], [-2.0, 0.5]])
    np.testing.assert_array_equal(box_truncate(X, 5.0).values, X)
    np.testing.assert_array_equal(box_truncate([[6.0, 0.0], [1.0, 1.0]], 5.0).values, [[1.0, 1.0]])
    assert len(box_truncate([[6.0, 0.0]], 5.0)) == 0
    assert box_truncate(SampleSet(X, "q"), 1.0).label == "q"
    with pytest.raises(ValueError):
        box_truncate(X, -1.0)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (10, 3), elements=finite), st.floats(0.5, 9))
def test_box_truncate_is_idempotent(X, edge):
    once = box_truncate(X, edge)
    np.testing.assert_array_equal(box_truncate(once, edge).values, once.values)


def test_correlation_examples():
    rng = np.random.default_rng(7)
    a = rng.normal(size=500)
    R = correlation_matrix(np.column_stack([a, a, rng.normal(size=500)]))
    assert R[0, 1] == pytest.approx(1.0, abs=1e-12)
    X = rng.normal(size=(100_000, 4))
    R = correlation_matrix(X)
    off = R[~np.eye(4, dtype=bool)]
    assert np.all(np.abs(off) < 4 / np.sqrt(len(X)))
    with pytest.raises(ValueError):
        correlation_matrix(np.column_stack([a, np.ones(500)]))


def test_correlation_sign_flip():
    X = np.random.default_rng(8).normal(size=(50, 3))
    R = correlation_matrix(X)
    F = X.copy()
    F[:, 1] = -F[:, 1]
    Rf = correlation_matrix(F)
    np.testing.assert_array_equal(Rf[1, [0, 2]], -R[1, [0, 2]])
    np.testing.assert_array_equal(Rf[0, 2], R[0, 2])


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (12, 3), elements=st.floats(-10, 10, allow_subnormal=False).filter(lambda v: v == 0 or abs(v) > 1e-6)))
def test_correlation_matrix_shape(X):
    if np.any(X.std(axis=0) < 1e-3):
        return
    R = correlation_matrix(X)
    np.testing.assert_array_equal(R, R.T)
    np.testing.assert_array_equal(np.diag(R), 1.0)
    assert np.all(np.abs(R) <= 1.0)


def test_metric_csv_round_trip(tmp_path):
    recs = [MetricRecord("mmd2", 0.1 + 0.2, 10, 20, "rbf", 1.5, 3), MetricRecord("ksd", -1e-5, 7, 0)]
    write_metric_csv(recs, tmp_path / "m.csv")
    back = read_metric_csv(tmp_path / "m.csv")
    assert back[0] == recs[0]
    assert back[1].metric == "ksd" and np.isnan(back[1].bandwidth)


def test_sample_set():
    s = SampleSet([1.0, 2.0])
    assert len(s) == 1 and s.dim == 2
    assert np.asarray(s).shape == (1, 2)
    with pytest.raises(ValueError):
        SampleSet([[np.inf, 0.0]])
