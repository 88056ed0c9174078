import numpy as np
import pytest
from scipy import optimize, stats
from scipy.special import ndtr, ndtri

from swolca.core import McmcConfig, PriorSpec, ValidationError
from swolca.distributions import make_rng
from swolca.gibbs import ModelData
from swolca.wolca import ConvergenceError, fit_weighted_probit, fit_wolca_step1, step2_design

from .test_gibbs import two_class_sample  # noqa: F401  (fixture)


def one_psu_each(n, strata=2):
    return np.repeat(np.arange(strata), n // strata), np.arange(n)


def test_intercept_only_symmetric():
    y = np.array([0, 1] * 50)
    s, c = one_psu_each(100)
    fit = fit_weighted_probit(np.ones((100, 1)), y, np.ones(100), s, c)
    assert fit.coef[0] == pytest.approx(0.0, abs=1e-10)


def test_intercept_only_weighted_mean():
    # weighted outcome mean 0.841
    y = np.array([1] * 841 + [0] * 159)
    w = np.ones(1000)
    s, c = one_psu_each(1000)
    fit = fit_weighted_probit(np.ones((1000, 1)), y, w, s, c)
    root = optimize.brentq(lambda b: np.sum(w * np.where(y == 1, stats.norm.pdf(b) / ndtr(b),
                                                         -stats.norm.pdf(b) / ndtr(-b))), -3, 3)
    assert fit.coef[0] == pytest.approx(root, abs=1e-8)
    assert fit.coef[0] == pytest.approx(ndtri(0.841), abs=1e-8)
    assert fit.coef[0] == pytest.approx(1.0, abs=0.002)


@pytest.fixture
def regression_data():
    gen = np.random.default_rng(4)
    n = 600
    v = gen.normal(size=n)
    X = np.column_stack([np.ones(n), v])
    y = (gen.random(n) < ndtr(0.3 + 0.8 * v)).astype(int)
    w = gen.uniform(1, 5, n)
    strata = np.repeat([1, 2, 3], n // 3)
    clusters = np.repeat(np.arange(60), 10)
    return X, y, w, strata, clusters


def test_weight_scale_invariance(regression_data):
    X, y, w, s, c = regression_data
    a = fit_weighted_probit(X, y, w, s, c)
    b = fit_weighted_probit(X, y, 2 * w, s, c)
    np.testing.assert_allclose(a.coef, b.coef, rtol=1e-12)
    np.testing.assert_allclose(a.cov, b.cov, rtol=1e-10)


def test_equal_weights_match_unweighted_mle(regression_data):
    X, y, _, s, c = regression_data
    fit = fit_weighted_probit(X, y, np.ones(len(y)), s, c)

    def negll(b):
        eta = X @ b
        return -np.sum(np.where(y == 1, stats.norm.logcdf(eta), stats.norm.logcdf(-eta)))

    ref = optimize.minimize(negll, np.zeros(2), method="BFGS", options={"gtol": 1e-10})
    np.testing.assert_allclose(fit.coef, ref.x, atol=1e-6)


def test_variance_and_intervals(regression_data):
    X, y, w, s, c = regression_data
    fit = fit_weighted_probit(X, y, w, s, c)
    assert fit.df == 60 - 3
    assert np.all(np.linalg.eigvalsh(fit.cov) >= -1e-12)
    np.testing.assert_allclose(fit.coef - fit.lower, fit.upper - fit.coef)
    tq = stats.t.ppf(0.975, 57)
    np.testing.assert_allclose(fit.upper - fit.coef, tq * fit.se)


def test_linearized_variance_oracle(regression_data):
    # independent recomputation of the stratified cluster sandwich
    X, y, w, s, c = regression_data
    fit = fit_weighted_probit(X, y, w, s, c)
    eta = X @ fit.coef
    wn = w / w.mean()
    pdf, cdf = stats.norm.pdf(eta), stats.norm.cdf(eta)
    g = np.where(y == 1, pdf / cdf, -pdf / (1 - cdf))
    scores = X * (wn * g)[:, None]
    info = np.zeros((2, 2))
    for i in range(len(y)):
        gi = g[i]
        # derivative of the probit score multiplier: -g (g + eta) for either outcome
        h = -gi * (gi + eta[i])
        info -= wn[i] * h * np.outer(X[i], X[i])
    meat = np.zeros((2, 2))
    for h in np.unique(s):
        totals = np.array([scores[(s == h) & (c == k)].sum(axis=0) for k in np.unique(c[s == h])])
        dev = totals - totals.mean(axis=0)
        meat += len(totals) / (len(totals) - 1) * dev.T @ dev
    inv = np.linalg.inv(info)
    np.testing.assert_allclose(fit.cov, inv @ meat @ inv, rtol=1e-8)


def test_separation_raises():
    v = np.linspace(-1, 1, 40)
    X = np.column_stack([np.ones(40), v])
    y = (v > 0).astype(int)
    s, c = one_psu_each(40)
    with pytest.raises(ConvergenceError):
        fit_weighted_probit(X, y, np.ones(40), s, c)


def test_no_degrees_of_freedom():
    with pytest.raises(ValidationError):
        fit_weighted_probit(np.ones((4, 1)), np.array([0, 1, 0, 1]), np.ones(4), np.arange(4), np.arange(4))


def test_step2_design_uses_mixture_coding():
    X = step2_design(np.array([0, 2]), np.array([[1.0], [0.5]]), 3)
    np.testing.assert_array_equal(X, [[1, 1, 0, 0, 0, 0], [0, 0, 0, 0, 1, 0.5]])


def test_step1_ignores_outcome(two_class_sample):  # noqa: F811
    ds = two_class_sample
    cfg = McmcConfig(n_iter=200, n_burn=100, thin=2, k_max=5)
    prior = PriorSpec.default(5, 4, 0)
    a = fit_wolca_step1(ModelData.from_dataset(ds, supervised=False), prior, cfg, make_rng(1))
    shuffled = ds.with_outcome(np.random.default_rng(0).permutation(ds.outcome))
    b = fit_wolca_step1(ModelData.from_dataset(shuffled, supervised=False), prior, cfg, make_rng(1))
    np.testing.assert_array_equal(a[0].theta, b[0].theta)
    np.testing.assert_array_equal(a[1], b[1])
