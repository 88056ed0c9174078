"""Two-stage Gibbs sampler for the (weighted) supervised overfitted LCA.

The pseudo-likelihood weights enter the full conditionals of ``pi``, ``theta``
and ``xi`` as exponents ``w_i / kappa``; allocations and latent probit draws
use the unexponentiated complete-data likelihood.  Setting every normalized
weight to one gives the unweighted sampler, and dropping the outcome gives the
unsupervised sampler used by the two-step comparator.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from .core import (McmcConfig, ModelParams, NumericalError, PriorSpec, SurveyDataset,
                   check_dataset, class_design, normalize_weights)
from ._kernels import sample_allocations, weighted_cell_counts
from .distributions import draw_dirichlet, draw_permutation, draw_truncnormal

LOG_FLOOR = 1e-300
HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


@dataclass(frozen=True)
class ModelData:
    """Sampler-ready view of a dataset: 0-based items, one-hot encoding,
    per-class design block ``V`` and normalized weights."""

    x: np.ndarray
    y: np.ndarray
    V: np.ndarray
    wtilde: np.ndarray
    levels: np.ndarray
    onehot: np.ndarray
    supervised: bool = True
    kappa: float = 1.0
    cell: np.ndarray = None

    def __post_init__(self):
        if self.cell is None:
            object.__setattr__(self, "cell", np.arange(self.x.shape[1]) * int(self.levels.max()) + self.x)

    @classmethod
    def from_dataset(cls, ds: SurveyDataset, weighted=True, supervised=True):
        check_dataset(ds)
        if weighted:
            nw = normalize_weights(ds.weight)
            wtilde, kappa = nw.wtilde, nw.kappa
        else:
            wtilde, kappa = np.ones(ds.n), 1.0
        return cls.build(ds.item_index(), ds.outcome, ds.covariates, wtilde, ds.item_levels,
                         supervised=supervised, kappa=kappa)

    @classmethod
    def build(cls, x, y, covariates, wtilde, levels, supervised=True, kappa=1.0):
        x = np.asarray(x, dtype=np.int64)
        n, J = x.shape
        levels = np.asarray(levels, dtype=np.int64)
        R = int(levels.max())
        onehot = np.zeros((n, J * R))
        onehot[np.arange(n)[:, None], np.arange(J) * R + x] = 1.0
        V = class_design(covariates) if supervised else np.zeros((n, 0))
        return cls(x=x, y=np.asarray(y, dtype=np.int64), V=V,
                   wtilde=np.asarray(wtilde, dtype=float), levels=levels, onehot=onehot,
                   supervised=supervised, kappa=kappa)

    @property
    def n(self):
        return self.x.shape[0]

    @property
    def n_items(self):
        return self.x.shape[1]

    @property
    def n_levels(self):
        return int(self.levels.max())

    @property
    def q(self):
        return self.V.shape[1]

    @property
    def level_mask(self):
        """(J, R) True where level r exists for item j."""
        return np.arange(self.n_levels)[None, :] < self.levels[:, None]

    def with_weights(self, wtilde):
        return ModelData(self.x, self.y, self.V, np.asarray(wtilde, dtype=float), self.levels,
                         self.onehot, self.supervised, self.kappa, self.cell)


@dataclass
class GibbsState:
    params: ModelParams
    c: np.ndarray
    z: np.ndarray
    iter: int = 0

    def copy(self):
        return GibbsState(self.params.copy(), self.c.copy(), self.z.copy(), self.iter)


@dataclass
class ChainOutput:
    """Kept draws: ``pi`` (M, K), ``theta`` (M, J, K, R), ``xi`` (M, K, q), ``c`` (M, n)."""

    pi: np.ndarray
    theta: np.ndarray
    xi: np.ndarray
    c: np.ndarray
    accepted_k: int
    meta: dict = field(default_factory=dict)

    @property
    def n_draws(self):
        return self.pi.shape[0]

    def params_at(self, m):
        return ModelParams(self.pi[m], self.theta[m], self.xi[m])


# ------------------------------------------------------------------ #
# Full-conditional parameters
# ------------------------------------------------------------------ #


def class_weight_matrix(c, wtilde, K):
    """(n, K) matrix with ``wtilde_i`` in column ``c_i``."""
    Wc = np.zeros((len(c), K))
    Wc[np.arange(len(c)), c] = wtilde
    return Wc


def pi_posterior(c, wtilde, alpha):
    """Dirichlet parameters ``alpha_k + sum_i I(c_i = k) wtilde_i``."""
    alpha = np.asarray(alpha, dtype=float)
    return alpha + np.bincount(np.asarray(c, dtype=np.int64), weights=wtilde,
                               minlength=alpha.shape[0])


def theta_posterior(x, c, wtilde, eta, K, levels, cell=None):
    """(J, K, R) Dirichlet parameters; absent levels (r >= R_j) are zero."""
    x = np.asarray(x, dtype=np.int64)
    n, J = x.shape
    R = int(np.max(levels))
    if cell is None:
        cell = np.arange(J) * R + x
    counts = weighted_cell_counts(cell, np.asarray(c, dtype=np.int64),
                                  np.asarray(wtilde, dtype=float), J * R, K)
    counts = counts.reshape(J, R, K).transpose(0, 2, 1)
    mask = (np.arange(R)[None, :] < np.asarray(levels)[:, None])[:, None, :]
    return np.where(mask, counts + np.asarray(eta, dtype=float)[:R], 0.0)


def xi_posterior(V, z, c, wtilde, mu0, sigma0_diag, K):
    """Per-class normal full conditional as ``(mean (K, q), precision (K, q, q))``.

    precision_k = Sigma0^-1 + V' C_k W V and
    mean_k = precision_k^-1 (Sigma0^-1 mu0 + V' C_k W z).
    """
    n, q = V.shape
    Wc = class_weight_matrix(c, wtilde, K)
    prior_prec = 1.0 / np.asarray(sigma0_diag, dtype=float)
    outer = (V[:, :, None] * V[:, None, :]).reshape(n, q * q)
    prec = (Wc.T @ outer).reshape(K, q, q) + np.diag(prior_prec)[None]
    rhs = Wc.T @ (V * z[:, None]) + (prior_prec * mu0)[None, :]
    mean = np.linalg.solve(prec, rhs[:, :, None])[:, :, 0]
    return mean, prec


def allocation_logprob(params: ModelParams, data: ModelData, z=None):
    """Unnormalized log p(c_i = k | rest), shape (n, K)."""
    J, K, R = params.theta.shape
    logtheta = np.log(np.maximum(params.theta, LOG_FLOOR)).transpose(0, 2, 1).reshape(J * R, K)
    logp = data.onehot @ logtheta + np.log(np.maximum(params.pi, LOG_FLOOR))[None, :]
    if data.supervised and z is not None:
        resid = z[:, None] - linear_predictors(data.V, params.xi)
        logp = logp - 0.5 * resid * resid
    return logp


def linear_predictors(V, xi):
    """(n, K) matrix of ``v_i' xi_k``; column loop beats matmul for tiny q."""
    out = np.outer(V[:, 0], xi[:, 0])
    for col in range(1, V.shape[1]):
        out += np.outer(V[:, col], xi[:, col])
    return out


# ------------------------------------------------------------------ #
# Gibbs updates
# ------------------------------------------------------------------ #


def update_pi(state: GibbsState, data: ModelData, prior: PriorSpec, rng):
    return draw_dirichlet(pi_posterior(state.c, data.wtilde, prior.alpha), rng)


def update_theta(state: GibbsState, data: ModelData, prior: PriorSpec, rng):
    K = state.params.n_classes
    alpha = theta_posterior(data.x, state.c, data.wtilde, prior.eta, K, data.levels, data.cell)
    return draw_dirichlet(alpha, rng)


def _batched_mvn_from_precision(mean, prec, rng, ridge):
    K, q = mean.shape
    eye = np.eye(q)
    L = np.empty_like(prec)
    for k in range(K):
        try:
            L[k] = np.linalg.cholesky(prec[k])
        except np.linalg.LinAlgError:
            try:
                L[k] = np.linalg.cholesky(prec[k] + ridge * eye)
            except np.linalg.LinAlgError:
                raise NumericalError(f"xi precision for class {k} is not positive definite") from None
    eps = rng.standard_normal((K, q))
    # x = mean + L^-T eps has covariance (L L')^-1
    return mean + np.linalg.solve(L.transpose(0, 2, 1), eps[:, :, None])[:, :, 0]


def update_xi(state: GibbsState, data: ModelData, prior: PriorSpec, rng, ridge=1e-8):
    K = state.params.n_classes
    mean, prec = xi_posterior(data.V, state.z, state.c, data.wtilde, prior.mu0,
                              prior.sigma0_diag, K)
    return _batched_mvn_from_precision(mean, prec, rng, ridge)


def update_c(state: GibbsState, data: ModelData, rng):
    p = state.params
    J, K, R = p.theta.shape
    logtheta = np.log(np.maximum(p.theta, LOG_FLOOR)).transpose(0, 2, 1).reshape(J * R, K)
    item_ll = data.onehot @ logtheta
    c, bad = sample_allocations(item_ll, np.log(np.maximum(p.pi, LOG_FLOOR)), data.V,
                                np.ascontiguousarray(p.xi), state.z, data.supervised,
                                rng.random(data.n))
    if bad >= 0:
        raise NumericalError(f"all class log-probabilities are -inf for individual {bad}")
    return c


def update_z(state: GibbsState, data: ModelData, rng):
    eta = np.einsum("iq,iq->i", data.V, state.params.xi[state.c])
    lower = np.where(data.y == 1, 0.0, -np.inf)
    upper = np.where(data.y == 1, np.inf, 0.0)
    return draw_truncnormal(eta, lower, upper, rng)


def apply_permutation(state: GibbsState, perm) -> GibbsState:
    """Relabel classes so that new class ``k`` is old class ``perm[k]``."""
    perm = np.asarray(perm)
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size)
    p = state.params
    params = ModelParams(p.pi[perm], p.theta[:, perm, :], p.xi[perm])
    return GibbsState(params, inv[state.c], state.z.copy(), state.iter)


def permute_labels(state: GibbsState, rng) -> GibbsState:
    return apply_permutation(state, draw_permutation(state.params.n_classes, rng))


def log_pseudo_posterior(state: GibbsState, data: ModelData, prior: PriorSpec) -> float:
    """Complete-data log pseudo-posterior (up to a constant), weights as exponents."""
    p = state.params
    J, K, R = p.theta.shape
    if data.supervised:
        pos = state.z > 0
        if np.any(pos != (data.y == 1)):
            return -np.inf
    logpi = np.log(np.maximum(p.pi, LOG_FLOOR))
    logtheta = np.log(np.maximum(p.theta, LOG_FLOOR))
    per_i = logpi[state.c] + logtheta[np.arange(J)[None, :], state.c[:, None], data.x].sum(axis=1)
    if data.supervised:
        eta = np.einsum("iq,iq->i", data.V, p.xi[state.c])
        per_i = per_i - 0.5 * (state.z - eta) ** 2 - HALF_LOG_2PI
    lp = float(np.dot(data.wtilde, per_i))

    alpha = prior.alpha
    lp += gammaln(alpha.sum()) - gammaln(alpha).sum() + np.dot(alpha - 1.0, logpi)
    mask = data.level_mask
    eta = np.where(mask, prior.eta[:R][None, :], 0.0)
    norm = gammaln(eta.sum(axis=1)) - np.where(mask, gammaln(np.where(mask, eta, 1.0)), 0.0).sum(axis=1)
    lp += K * norm.sum() + np.sum(np.where(mask[:, None, :], (eta[:, None, :] - 1.0) * logtheta, 0.0))
    if data.supervised:
        dev = p.xi - prior.mu0[None, :]
        lp += -0.5 * np.sum(dev * dev / prior.sigma0_diag[None, :])
        lp += -0.5 * K * (np.sum(np.log(prior.sigma0_diag)) + data.q * np.log(2 * np.pi))
    return lp


# ------------------------------------------------------------------ #
# Chains
# ------------------------------------------------------------------ #


def init_state(data: ModelData, K: int, prior: PriorSpec, rng) -> GibbsState:
    """Uniformly random allocations; parameters drawn from their full conditionals."""
    c = rng.integers(0, K, size=data.n)
    q = data.q
    z = np.zeros(data.n)
    if data.supervised:
        z = draw_truncnormal(np.zeros(data.n), np.where(data.y == 1, 0.0, -np.inf),
                             np.where(data.y == 1, np.inf, 0.0), rng)
    params = ModelParams(np.full(K, 1.0 / K), np.zeros((data.n_items, K, data.n_levels)),
                         np.zeros((K, q)))
    state = GibbsState(params, c, z)
    state.params.pi = update_pi(state, data, prior, rng)
    state.params.theta = update_theta(state, data, prior, rng)
    if data.supervised:
        state.params.xi = update_xi(state, data, prior, rng)
    return state


def gibbs_step(state: GibbsState, data: ModelData, prior: PriorSpec, rng, permute=True,
               ridge=1e-8) -> GibbsState:
    """One sweep in the order pi, theta, xi, c, z, then a random relabeling."""
    state.params.pi = update_pi(state, data, prior, rng)
    state.params.theta = update_theta(state, data, prior, rng)
    if data.supervised:
        state.params.xi = update_xi(state, data, prior, rng, ridge)
    state.c = update_c(state, data, rng)
    if data.supervised:
        state.z = update_z(state, data, rng)
    if permute:
        state = permute_labels(state, rng)
    state.iter += 1
    return state


def run_chain(data, prior, state, n_iter, n_burn, thin, rng, permute=True, ridge=1e-8,
              callback=None):
    """Run ``n_iter`` sweeps from ``state`` and keep every ``thin``-th draw after burn-in."""
    kept = range(n_burn, n_iter, thin)
    M = len(kept)
    J, K, R = state.params.theta.shape
    pi = np.empty((M, K))
    theta = np.empty((M, J, K, R))
    xi = np.empty((M, K, data.q))
    cdtype = np.int16 if K < 2 ** 15 else np.int64
    cs = np.empty((M, data.n), dtype=cdtype)
    m = 0
    start = time.perf_counter()
    for it in range(n_iter):
        state = gibbs_step(state, data, prior, rng, permute=permute, ridge=ridge)
        if callback is not None:
            callback(state)
        if it >= n_burn and (it - n_burn) % thin == 0:
            pi[m] = state.params.pi
            theta[m] = state.params.theta
            xi[m] = state.params.xi
            cs[m] = state.c
            m += 1
    chain = ChainOutput(pi, theta, xi, cs, accepted_k=K,
                        meta={"n_iter": n_iter, "n_burn": n_burn, "thin": thin,
                              "runtime_s": time.perf_counter() - start})
    return chain, state


def count_nonempty(pi_draws, cutoff):
    return (np.asarray(pi_draws) > cutoff).sum(axis=1)


def estimate_k(pi_draws, cutoff) -> int:
    """Median number of classes with ``pi_k > cutoff`` (half rounds up), at least 1."""
    med = float(np.median(count_nonempty(pi_draws, cutoff)))
    return max(1, int(np.floor(med + 0.5)))


def run_adaptive(data: ModelData, prior: PriorSpec, config: McmcConfig, rng):
    """Overfitted stage at ``K = config.k_max``; returns ``(k_hat, chain, final_state)``."""
    K = config.k_max
    prior = prior if prior.alpha.shape[0] == K else prior.with_classes(K, 1.0 / K)
    state = init_state(data, K, prior, rng)
    chain, state = run_chain(data, prior, state, config.n_iter, config.n_burn, config.thin, rng,
                             ridge=config.ridge)
    k_hat = estimate_k(chain.pi, config.class_cutoff)
    chain.meta["stage"] = "adaptive"
    chain.meta["k_hat"] = k_hat
    return k_hat, chain, state


def reduce_state(state: GibbsState, data: ModelData, k: int, rng) -> GibbsState:
    """Keep the ``k`` largest classes of ``state`` and reallocate everyone to them."""
    p = state.params
    keep = np.sort(np.argsort(-p.pi, kind="stable")[:k])
    pi = p.pi[keep] / p.pi[keep].sum()
    params = ModelParams(pi, p.theta[:, keep, :], p.xi[keep])
    reduced = GibbsState(params, np.zeros(data.n, dtype=np.int64), state.z.copy(), state.iter)
    reduced.c = update_c(reduced, data, rng)
    return reduced


def run_fixed(data: ModelData, prior: PriorSpec, config: McmcConfig, k_hat: int, rng,
              init: GibbsState | None = None) -> ChainOutput:
    """Sampler at ``K = k_hat``; starts from ``init`` (reduced to ``k_hat`` classes) if given."""
    fixed_prior = prior.with_classes(k_hat, config.fixed_alpha)
    if init is not None:
        state = reduce_state(init, data, k_hat, rng)
    else:
        state = init_state(data, k_hat, fixed_prior, rng)
    chain, _ = run_chain(data, fixed_prior, state, config.n_iter, config.n_burn, config.thin, rng,
                         ridge=config.ridge)
    chain.meta["stage"] = "fixed"
    return chain


def run_sampler(data: ModelData, prior: PriorSpec, config: McmcConfig, rng, k_fixed=None):
    """Adaptive stage (unless ``k_fixed`` is given) followed by the fixed stage."""
    adaptive = None
    init = None
    if k_fixed is None:
        k_hat, adaptive, init = run_adaptive(data, prior, config, rng)
    else:
        k_hat = int(k_fixed)
    chain = run_fixed(data, prior, config, k_hat, rng, init=init)
    chain.meta["k_hat"] = k_hat
    if adaptive is not None:
        chain.meta["adaptive_runtime_s"] = adaptive.meta["runtime_s"]
        chain.meta["adaptive_nonempty"] = count_nonempty(adaptive.pi, config.class_cutoff).tolist()
    return chain, adaptive
