import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from swolca.core import NumericalError, ValidationError
from swolca.distributions import (
    cholesky_with_ridge,
    draw_categorical,
    draw_dirichlet,
    draw_mvnormal,
    draw_permutation,
    draw_truncnormal,
    make_rng,
)

N = 100_000
HALF_NORMAL_MEAN = math.sqrt(2 / math.pi)  # 0.7978845608...


def test_streams_reproducible_and_distinct():
    a = make_rng(5, 1).random(10)
    np.testing.assert_array_equal(a, make_rng(5, 1).random(10))
    assert not np.array_equal(a, make_rng(5, 2).random(10))
    assert not np.array_equal(a, make_rng(6, 1).random(10))


def test_dirichlet_concentration_limit(rng):
    np.testing.assert_allclose(draw_dirichlet([1e9, 1e9], rng), [0.5, 0.5], atol=1e-3)


@pytest.mark.parametrize("alpha, mean", [((1, 1, 1), (1 / 3, 1 / 3, 1 / 3)), ((2, 6), (0.25, 0.75))])
def test_dirichlet_means(rng, alpha, mean):
    draws = draw_dirichlet(np.tile(alpha, (N, 1)), rng)
    np.testing.assert_allclose(draws.mean(axis=0), mean, atol=0.01)


def test_dirichlet_tiny_shapes_stay_on_simplex(rng):
    draws = draw_dirichlet(np.full((2000, 30), 1 / 30), rng)
    assert np.all(draws >= 0)
    np.testing.assert_allclose(draws.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(np.isfinite(draws))


def test_dirichlet_zero_marks_absent_category(rng):
    draws = draw_dirichlet(np.tile([1.0, 2.0, 0.0], (100, 1)), rng)
    assert np.all(draws[:, 2] == 0)


@pytest.mark.parametrize("alpha", [(1, -1), (0, 0), (np.nan, 1)])
def test_dirichlet_rejects(rng, alpha):
    with pytest.raises(ValidationError):
        draw_dirichlet(alpha, rng)


def test_categorical_examples(rng):
    assert all(draw_categorical([1.0, 0.0, 0.0], rng) == 0 for _ in range(100))
    p = np.array([0.2, 0.3, 0.5])
    idx = draw_categorical(np.tile(p, (N, 1)), rng)
    np.testing.assert_allclose(np.bincount(idx, minlength=3) / N, p, atol=0.01)
    half = draw_categorical(np.tile([0.5, 0.5], (N, 1)), rng)
    assert abs((half == 0).mean() - 0.5) < 0.01
    with pytest.raises(ValidationError):
        draw_categorical([0.5, 0.6], rng)


def test_truncnormal_half_normal_mean(rng):
    z = draw_truncnormal(np.zeros(N), 0.0, np.inf, rng)
    assert np.all(z > 0)
    assert abs(z.mean() - HALF_NORMAL_MEAN) < 0.01
    z = draw_truncnormal(np.zeros(N), -np.inf, 0.0, rng)
    assert np.all(z < 0)


def test_truncnormal_far_tail(rng):
    z = draw_truncnormal(np.full(1000, -10.0), 0.0, np.inf, rng)
    assert np.all(np.isfinite(z)) and np.all(z > 0)
    # conditional mean of N(-10, 1) above 0 is about 1/10
    assert abs(z.mean() - 0.098) < 0.01


@given(st.floats(-30, 30), st.booleans())
@settings(max_examples=200, deadline=None)
def test_truncnormal_never_violates_bounds(mean, positive):
    gen = np.random.default_rng(1)
    lo, hi = (0.0, np.inf) if positive else (-np.inf, 0.0)
    z = draw_truncnormal(np.full(50, mean), lo, hi, gen)
    assert np.all(np.isfinite(z))
    assert np.all(z > 0) if positive else np.all(z < 0)


def test_truncnormal_two_sided_and_errors(rng):
    z = draw_truncnormal(np.zeros(N), -1.0, 1.0, rng)
    assert z.min() > -1 and z.max() < 1
    assert abs(z.mean()) < 0.01
    with pytest.raises(ValidationError):
        draw_truncnormal(0.0, 1.0, 1.0, rng)


def test_mvnormal_examples(rng):
    np.testing.assert_allclose(draw_mvnormal([1.0, -1.0], 1e-12 * np.eye(2), rng), [1.0, -1.0], atol=1e-4)
    draws = np.array([draw_mvnormal(np.zeros(2), np.eye(2), rng) for _ in range(20000)])
    np.testing.assert_allclose(np.cov(draws.T), np.eye(2), atol=0.05)
    cov = np.array([[2.0, 0.5], [0.5, 1.0]])
    L = np.linalg.cholesky(cov)
    draws = np.array([1.0, 2.0]) + rng.standard_normal((N, 2)) @ L.T
    np.testing.assert_allclose(draws.mean(axis=0), [1.0, 2.0], atol=0.02)
    # the generator itself, at lower volume
    own = np.array([draw_mvnormal([1.0, 2.0], cov, rng) for _ in range(20000)])
    np.testing.assert_allclose(own.mean(axis=0), [1.0, 2.0], atol=0.04)
    np.testing.assert_allclose(np.cov(own.T), cov, atol=0.08)


def test_cholesky_ridge_escalation():
    singular = np.array([[1.0, 1.0], [1.0, 1.0]])
    L, used = cholesky_with_ridge(singular)
    assert used > 0
    with pytest.raises(NumericalError):
        cholesky_with_ridge(np.array([[1.0, 0.0], [0.0, -1.0]]))


def test_permutations_uniform(rng):
    assert list(draw_permutation(1, rng)) == [0]
    swaps = np.array([draw_permutation(2, rng)[0] for _ in range(N)])
    assert abs((swaps == 0).mean() - 0.5) < 0.01
    counts = {p: 0 for p in itertools.permutations(range(3))}
    for _ in range(60000):
        counts[tuple(draw_permutation(3, rng))] += 1
    for c in counts.values():
        assert abs(c / 60000 - 1 / 6) < 0.01
    with pytest.raises(ValidationError):
        draw_permutation(0, rng)
