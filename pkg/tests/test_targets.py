import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ksivi.targets import (
    AnnealedPath,
    Banana,
    ConditionedDiffusion,
    GaussianMixture,
    LogisticRegression,
    StandardNormal,
    StudentTProduct,
    Tempered,
    annealed_score,
    eight_gaussians,
    multimodal,
    synthesize_logreg,
    tempered_score,
    x_shaped,
)
from ksivi.tensor import Tensor


def fd_score(target, x, h=1e-5):
    g = np.zeros_like(x)
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (target.log_density(x + e) - target.log_density(x - e)) / (2 * h)
    return g


def rel_err(a, b):
    return float(np.max(np.abs(a - b) / (np.abs(b) + 1e-6)))


TARGETS = {
    "normal": StandardNormal(3),
    "banana": Banana(),
    "multimodal": multimodal(),
    "x_shaped": x_shaped(),
    "eight": eight_gaussians(),
    "student": StudentTProduct(2.0, 2),
    "logreg": synthesize_logreg(30, 3, seed=0),
    "diffusion": ConditionedDiffusion.simulate(dim=20, seed=0),
    "tempered": Tempered(Banana(), 2.5),
}


def test_standard_normal_mode():
    np.testing.assert_array_equal(StandardNormal(2).score(np.zeros(2)), 0.0)


def test_banana_mode():
    np.testing.assert_array_equal(Banana().score(np.array([0.0, 1.0])), 0.0)


def test_multimodal_origin():
    np.testing.assert_allclose(multimodal().score(np.zeros(2)), 0.0, atol=1e-15)


def test_student_t_score():
    np.testing.assert_allclose(StudentTProduct(2.0, 2).score(np.array([1.0, 0.0])), [-1.0, 0.0], atol=1e-15)


def test_logreg_empty_dataset_is_prior():
    t = LogisticRegression(np.zeros((0, 3)), np.zeros(0))
    b = np.array([1.0, -2.0, 3.0])
    np.testing.assert_allclose(t.score(b), -0.01 * b, atol=1e-15)


def test_logreg_score_at_zero():
    t = synthesize_logreg(40, 3, seed=7)
    expected = (t.labels - 0.5) @ t.covariates
    np.testing.assert_allclose(t.score(np.zeros(4)), expected, atol=1e-12)


def test_synthesize_logreg_shapes_and_determinism():
    t = synthesize_logreg(1, 1, seed=3)
    assert t.dim == 2
    a, b = synthesize_logreg(20, 4, seed=9), synthesize_logreg(20, 4, seed=9)
    np.testing.assert_array_equal(a.covariates, b.covariates)
    np.testing.assert_array_equal(a.labels, b.labels)
    np.testing.assert_array_equal(a.covariates[:, 0], 1.0)
    with pytest.raises(ValueError):
        synthesize_logreg(0, 2)


def test_diffusion_score_matches_differences_d100():
    t = ConditionedDiffusion.simulate(dim=100, seed=1, dt=0.01)
    x = np.random.default_rng(2).normal(scale=0.5, size=100)
    assert rel_err(t.score(x), fd_score(t, x)) < 1e-4


def test_normal_log_density_difference():
    t = StandardNormal(2)
    assert t.log_density(np.zeros(2)) - t.log_density(np.array([1.0, 0.0])) == 0.5


def test_multimodal_log_density_symmetric():
    t = multimodal()
    assert t.log_density(np.array([2.0, 0.0])) - t.log_density(np.array([-2.0, 0.0])) == pytest.approx(0.0, abs=1e-15)


def test_banana_log_density_at_mode():
    t = Banana()
    x = np.array([0.0, 1.0])
    assert t.log_density(x) == pytest.approx(0.0, abs=1e-15)
    # quadratic form in the pulled-back coordinates
    v = np.array([0.5, 1.0 - 0.25 - 1.0 + 0.3])
    x = np.array([0.5, 0.25 + v[1] + 1.0])
    assert t.log_density(x) == pytest.approx(-0.5 * v @ t.precision @ v, rel=1e-13)


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        StandardNormal(2).score(np.zeros(3))
    with pytest.raises(ValueError):
        Banana().log_density(np.zeros(3))


def test_invalid_parameters():
    with pytest.raises(ValueError):
        StudentTProduct(0.0)
    with pytest.raises(ValueError):
        LogisticRegression(np.zeros((3, 2)), np.zeros(2))
    with pytest.raises(ValueError):
        Tempered(StandardNormal(2), 0.5)
    with pytest.raises(ValueError):
        ConditionedDiffusion(np.zeros(3), dim=100)


def test_batch_matches_rows_and_tensor():
    for name, t in TARGETS.items():
        X = np.random.default_rng(0).normal(size=(5, t.dim))
        S = t.score(X)
        rows = np.stack([t.score(x) for x in X])
        np.testing.assert_allclose(S, rows, rtol=1e-13, atol=1e-13, err_msg=name)
        np.testing.assert_allclose(t.score(Tensor(X)).data, S, rtol=1e-13, atol=1e-13, err_msg=name)


@pytest.mark.parametrize("name", sorted(TARGETS))
def test_score_matches_log_density_differences(name):
    t = TARGETS[name]
    rng = np.random.default_rng(11)
    scale = 0.5 if name == "diffusion" else 1.5
    worst = 0.0
    for _ in range(100):
        x = rng.normal(scale=scale, size=t.dim)
        worst = max(worst, rel_err(t.score(x), fd_score(t, x)))
    assert worst < 1e-4


def test_eight_gaussians_origin():
    t = eight_gaussians()
    assert np.linalg.norm(t.score(np.zeros(2))) < 1e-10
    angles = np.arange(8) * np.pi / 4
    expected = 10.0 * np.column_stack([np.cos(angles), np.sin(angles)])
    got = np.asarray(t.means)
    assert all(np.min(np.linalg.norm(got - m, axis=1)) < 1e-12 for m in expected)


def test_mixture_validation():
    with pytest.raises(ValueError):
        GaussianMixture((0.5, 0.5, 0.5), np.zeros((2, 2)), np.stack([np.eye(2)] * 2))
    with pytest.raises(ValueError):
        GaussianMixture((0.5, -0.5), np.zeros((2, 2)), np.stack([np.eye(2)] * 2))
    with pytest.raises(ValueError):
        GaussianMixture((1.0,), np.zeros((1, 2)), np.eye(3)[None])


def test_mixture_sampler_moments():
    X = x_shaped().sample(200_000, 0)
    emp = np.cov(X.T)
    # equal-weight zero-mean components: covariance is the average of the two
    np.testing.assert_allclose(emp, 2.0 * np.eye(2), atol=0.03)


def test_tempered_scaling():
    t = StandardNormal(2)
    x = np.array([4.0, -2.0])
    np.testing.assert_array_equal(tempered_score(t, 1.0, x), t.score(x))
    np.testing.assert_array_equal(tempered_score(t, 2.0, x), [-2.0, 1.0])
    assert np.all(np.abs(tempered_score(t, 1e12, x)) < 1e-11)
    with pytest.raises(ValueError):
        tempered_score(t, 0.9, x)


def test_annealed_endpoints_and_midpoint():
    class Fixed(StandardNormal):
        def __init__(self, value):
            object.__setattr__(self, "dim", 2)
            object.__setattr__(self, "value", np.asarray(value, dtype=float))

        def _score(self, X):
            return np.tile(self.value, (len(X), 1))

    path = AnnealedPath(Fixed([3.0, 2.0]), 3, base=Fixed([-1.0, 0.0]), lambdas=[1.0, 0.5, 0.0])
    x = np.zeros(2)
    np.testing.assert_array_equal(annealed_score(path, 0, x), [3.0, 2.0])
    np.testing.assert_array_equal(annealed_score(path, 1, x), [1.0, 1.0])
    np.testing.assert_array_equal(annealed_score(path, 2, x), [-1.0, 0.0])
    with pytest.raises(IndexError):
        annealed_score(path, 3, x)


def test_annealed_default_schedule():
    path = AnnealedPath(Banana(), 5)
    np.testing.assert_allclose(path.lambdas, [1.0, 0.8, 0.6, 0.4, 0.2])
    x = np.array([0.3, 0.7])
    np.testing.assert_array_equal(path.score(0, x), Banana().score(x))
    with pytest.raises(ValueError):
        AnnealedPath(Banana(), 2, lambdas=[0.9, 0.1])


@settings(max_examples=50, deadline=None)
@given(
    arrays(np.float64, 2, elements=st.floats(-3, 3)),
    st.floats(0, 1),
    st.floats(0, 1),
    st.floats(0, 1),
)
def test_annealed_score_is_affine_in_lambda(x, l1, l2, a):
    tgt = Banana()

    def s(lam):
        return AnnealedPath(tgt, 2, lambdas=[1.0, lam]).score(1, x)

    mixed = s(a * l1 + (1 - a) * l2)
    combo = a * s(l1) + (1 - a) * s(l2)
    np.testing.assert_allclose(mixed, combo, rtol=1e-12, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, 2, elements=st.floats(-3, 3)), st.integers(0, 4), st.integers(0, 4))
def test_annealed_score_affine_exact_on_dyadic_grid(x, i, j):
    # quarter-step lambdas, half-way mix: every product and sum is exact
    x = np.round(x * 8) / 8
    tgt = StandardNormal(2)
    l1, l2 = i / 4, j / 4

    def s(lam):
        return AnnealedPath(tgt, 2, lambdas=[1.0, lam]).score(1, x)

    np.testing.assert_array_equal(s(0.5 * l1 + 0.5 * l2), 0.5 * s(l1) + 0.5 * s(l2))


def test_diffusion_decomposes_into_prior_and_observations():
    t = ConditionedDiffusion.simulate(dim=20, seed=4)
    X = np.random.default_rng(0).normal(size=(3, 20))
    obs = -0.5 * np.sum((X[:, t.obs_indices] - t.observations) ** 2, axis=1) / t.obs_std**2
    np.testing.assert_allclose(t.log_density(X), t.log_prior(X) + obs, rtol=1e-13)
    # unobserved coordinates only feel the prior
    flat = ConditionedDiffusion(t.observations, dim=20, dt=t.dt, obs_std=1e12)
    free = np.setdiff1d(np.arange(20), t.obs_indices)
    np.testing.assert_allclose(t.score(X)[:, free], flat.score(X)[:, free], rtol=1e-13)


def test_diffusion_observation_grid():
    t = ConditionedDiffusion.simulate(dim=100, seed=0, dt=0.01)
    np.testing.assert_array_equal(t.obs_indices + 1, np.arange(5, 101, 5))
    assert len(t.observations) == 20
    a = ConditionedDiffusion.simulate(dim=50, seed=3)
    b = ConditionedDiffusion.simulate(dim=50, seed=3)
    np.testing.assert_array_equal(a.observations, b.observations)
    assert a.dt == pytest.approx(1 / 50)
