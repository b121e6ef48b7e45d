import math

import numpy as np
import pytest
from conftest import GAUSS, LOGIT, central_diff, random_batch
from hypothesis import given
from hypothesis import strategies as st

from fedol.glm import Batch, DomainError, cumulant, hessian, log_likelihood, score, stack_batches

finite = st.floats(-700, 700, allow_nan=False)


def test_cumulant_reference_points():
    assert cumulant(LOGIT, 0.0) == pytest.approx(math.log(2), abs=1e-12)
    assert cumulant(GAUSS, 2.0) == 2.0


def test_logistic_cumulant_large_argument():
    # 50-digit evaluation of log(1 + exp(-50)) gives 1.9287498479639178e-22
    eps = 1.9287498479639178e-22
    assert 0.0 <= cumulant(LOGIT, 50.0) - 50.0 < 1e-20
    assert cumulant(LOGIT, -50.0) == pytest.approx(eps, rel=1e-12)
    assert np.isfinite(cumulant(LOGIT, 1e6))


def test_cumulant_rejects_non_finite():
    with pytest.raises(DomainError):
        cumulant(LOGIT, float("inf"))
    with pytest.raises(DomainError):
        cumulant(GAUSS, float("nan"))


@given(finite)
def test_logistic_variance_bounds(theta):
    v = float(LOGIT.variance(theta))
    assert 0.0 < v <= 0.25


@given(finite)
def test_logistic_mean_is_derivative_of_cumulant(theta):
    h = 1e-6
    if abs(theta) < 30:
        fd = (cumulant(LOGIT, theta + h) - cumulant(LOGIT, theta - h)) / (2 * h)
        assert float(LOGIT.mean(theta)) == pytest.approx(fd, abs=1e-7)


def test_log_likelihood_reference_values(rng):
    b = random_batch(rng, 7, 3, LOGIT)
    assert log_likelihood(LOGIT, np.zeros(3), b) == pytest.approx(-7 * math.log(2), rel=1e-14)
    g = Batch(0, 1, np.ones((2, 1)), np.array([1.0, 2.0]))
    assert log_likelihood(GAUSS, np.zeros(1), g) == 0.0


@pytest.mark.parametrize("family", [GAUSS, LOGIT])
def test_log_likelihood_matches_summation(rng, family):
    b = random_batch(rng, 5, 3, family)
    beta = rng.standard_normal(3)
    naive = 0.0
    for x, y in zip(b.X, b.y):
        t = sum(xj * bj for xj, bj in zip(x, beta))
        d = t * t / 2 if family is GAUSS else math.log1p(math.exp(t))
        naive += y * t - d
    assert log_likelihood(family, beta, b) == pytest.approx(naive, abs=1e-12)


def test_score_reference_values():
    b = Batch(0, 1, np.array([[1.0, 0.0]]), np.array([1.0]), LOGIT)
    np.testing.assert_allclose(score(LOGIT, np.zeros(2), b), [0.5, 0.0])
    rng = np.random.default_rng(3)
    X = rng.standard_normal((6, 3))
    beta = rng.standard_normal(3)
    np.testing.assert_allclose(score(GAUSS, beta, Batch(0, 1, X, X @ beta)), 0.0, atol=1e-12)


@pytest.mark.parametrize("family", [GAUSS, LOGIT])
def test_score_matches_finite_differences(rng, family):
    b = random_batch(rng, 6, 4, family)
    beta = rng.standard_normal(4)
    fd = central_diff(lambda v: log_likelihood(family, v, b), beta)
    np.testing.assert_allclose(score(family, beta, b), fd, rtol=1e-6, atol=1e-8)


@pytest.mark.parametrize("family", [GAUSS, LOGIT])
def test_hessian_matches_finite_differences(rng, family):
    b = random_batch(rng, 8, 3, family)
    beta = rng.standard_normal(3)
    H = hessian(family, beta, b)
    fd = np.column_stack([central_diff(lambda v: score(family, v, b)[i], beta) for i in range(3)])
    np.testing.assert_allclose(H, fd.T, rtol=1e-5, atol=1e-7)
    np.testing.assert_array_equal(H, H.T)
    assert np.linalg.eigvalsh(H).max() <= 1e-12


def test_hessian_closed_forms(rng):
    b = random_batch(rng, 9, 3, LOGIT)
    np.testing.assert_allclose(hessian(GAUSS, rng.standard_normal(3), b), -b.X.T @ b.X, atol=1e-12)
    np.testing.assert_allclose(hessian(LOGIT, np.zeros(3), b), -0.25 * b.X.T @ b.X, atol=1e-12)


@given(st.integers(0, 10_000), st.floats(0.01, 0.99))
def test_log_likelihood_is_concave(seed, t):
    rng = np.random.default_rng(seed)
    b = random_batch(rng, 10, 3, LOGIT)
    b1, b2 = rng.standard_normal(3) * 3, rng.standard_normal(3) * 3
    mid = log_likelihood(LOGIT, t * b1 + (1 - t) * b2, b)
    assert mid >= t * log_likelihood(LOGIT, b1, b) + (1 - t) * log_likelihood(LOGIT, b2, b) - 1e-10


def test_batch_validation():
    with pytest.raises(ValueError):
        Batch(0, 1, np.zeros((0, 2)), np.zeros(0))
    with pytest.raises(ValueError):
        Batch(0, 1, np.zeros((2, 2)), np.array([0.0, 0.5]), LOGIT)
    with pytest.raises(ValueError):
        Batch(0, 0, np.zeros((1, 2)), np.zeros(1))
    with pytest.raises(ValueError):
        log_likelihood(GAUSS, np.zeros(3), Batch(0, 1, np.zeros((1, 2)), np.zeros(1)))


def test_stack_batches(rng):
    a, b = random_batch(rng, 3, 2, GAUSS), random_batch(rng, 4, 2, GAUSS, batch_index=2)
    s = stack_batches([a, b])
    assert s.n == 7 and s.batch_index == 2
    beta = rng.standard_normal(2)
    assert log_likelihood(GAUSS, beta, s) == pytest.approx(
        log_likelihood(GAUSS, beta, a) + log_likelihood(GAUSS, beta, b)
    )
