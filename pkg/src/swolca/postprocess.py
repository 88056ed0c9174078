"""Chain post-processing: relabeling, posterior summaries and the sandwich
variance rescaling of posterior draws.

The rescaling works in an unconstrained parameterization: additive log-ratios
(last category as reference) for ``pi`` and every ``theta[j, k, :R_j]``, and
``xi`` as is.  Its Hessian and scores come from the observed-data pseudo
log-likelihood with the allocations and latent probit variables integrated out.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage
from scipy.linalg import solve_triangular
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import squareform
from scipy.special import log_ndtr, logsumexp, ndtr

from .core import McmcConfig, ModelParams, NumericalError, PriorSpec, ValidationError
from .distributions import cholesky_with_ridge, make_rng
from .gibbs import LOG_FLOOR, ChainOutput, ModelData, linear_predictors

log = logging.getLogger(__name__)

SIMPLEX_FLOOR = 1e-8
MAX_SIMILARITY_SAMPLE = 1000


# ------------------------------------------------------------------ #
# Relabeling
# ------------------------------------------------------------------ #


@dataclass
class RelabeledChain:
    chain: ChainOutput
    permutations: np.ndarray
    reference: np.ndarray
    subsample: np.ndarray

    def __getattr__(self, name):
        # expose the draws directly (pi, theta, xi, c, ...)
        if name in ("chain", "permutations", "reference", "subsample"):
            raise AttributeError(name)
        return getattr(self.chain, name)


def permute_chain(chain: ChainOutput, perms) -> ChainOutput:
    """Apply per-draw permutations: new label ``k`` of draw ``m`` is old label ``perms[m, k]``."""
    perms = np.asarray(perms)
    M, K = perms.shape
    rows = np.arange(M)[:, None]
    inv = np.empty_like(perms)
    inv[rows, perms] = np.arange(K)[None, :]
    pi = chain.pi[rows, perms]
    theta = chain.theta[rows, :, perms].transpose(0, 2, 1, 3) if M else chain.theta
    xi = chain.xi[rows, perms]
    c = np.take_along_axis(inv, chain.c.astype(np.int64), axis=1).astype(chain.c.dtype)
    return replace(chain, pi=pi, theta=theta, xi=xi, c=c, meta=dict(chain.meta))


def posterior_similarity(c_draws, K):
    """Fraction of draws in which each pair of individuals shares a class."""
    c_draws = np.asarray(c_draws, dtype=np.int64)
    M, n = c_draws.shape
    B = np.zeros((n, M * K))
    B[np.arange(n)[None, :], (np.arange(M)[:, None] * K + c_draws)] = 1.0
    return (B @ B.T) / M


def relabel(chain: ChainOutput, k_hat: int, rng=None, max_sample=MAX_SIMILARITY_SAMPLE) -> RelabeledChain:
    """Resolve label switching against a consensus partition.

    The co-assignment similarity is clustered by complete linkage into
    ``k_hat`` groups; each draw is then permuted to maximise its agreement with
    that reference partition (Hungarian assignment on the contingency table).
    Reference groups are numbered to agree with the first kept draw.
    """
    M, n = chain.c.shape
    K = chain.accepted_k
    if M == 0:
        raise ValidationError("chain has no draws")
    observed = np.unique(chain.c)
    if k_hat > observed.size or k_hat > K:
        raise ValidationError(f"k_hat={k_hat} exceeds the {observed.size} observed class labels")
    rng = make_rng(0) if rng is None else rng
    if n > max_sample:
        sub = np.sort(rng.choice(n, size=max_sample, replace=False))
    else:
        sub = np.arange(n)
    cs = chain.c[:, sub].astype(np.int64)
    if k_hat == 1:
        groups = np.zeros(sub.size, dtype=np.int64)
    else:
        S = posterior_similarity(cs, K)
        dist = np.clip(1.0 - S, 0.0, None)
        np.fill_diagonal(dist, 0.0)
        Z = linkage(squareform(dist, checks=False), method="complete")
        groups = fcluster(Z, t=k_hat, criterion="maxclust") - 1

    # number the reference groups by agreement with the first draw
    G = int(groups.max()) + 1
    first = np.zeros((K, K))
    np.add.at(first, (groups, cs[0]), 1.0)
    _, to_label = linear_sum_assignment(-first)
    ref = to_label[groups]

    perms = np.empty((M, K), dtype=np.int64)
    for m in range(M):
        table = np.zeros((K, K))
        np.add.at(table, (cs[m], ref), 1.0)
        # rows: old labels, cols: reference labels
        old, new = linear_sum_assignment(-table)
        perm = np.empty(K, dtype=np.int64)
        perm[new] = old
        perms[m] = perm
    relabeled = permute_chain(chain, perms)
    relabeled.meta["n_reference_groups"] = G

    reference = modal_class(relabeled.c, K)
    reference[sub] = ref
    return RelabeledChain(relabeled, perms, reference, sub)


def modal_class(c_draws, K):
    """Most frequent label per individual; ties go to the smallest label."""
    c_draws = np.asarray(c_draws, dtype=np.int64)
    M, n = c_draws.shape
    counts = np.zeros((n, K), dtype=np.int64)
    np.add.at(counts, (np.broadcast_to(np.arange(n), (M, n)), c_draws), 1)
    return counts.argmax(axis=1)


# ------------------------------------------------------------------ #
# Summaries
# ------------------------------------------------------------------ #


def _quantiles(draws):
    med, lo, hi = np.quantile(draws, [0.5, 0.025, 0.975], axis=0)
    return {"median": med, "lower": lo, "upper": hi}


def summarize(chain) -> dict:
    """Posterior medians and equal-tailed 95% intervals for pi, theta and xi.

    ``pi["median"]`` is renormalized onto the simplex; the element-wise medians
    are kept under ``pi["median_raw"]``.
    """
    if chain.pi.shape[0] == 0:
        raise ValidationError("cannot summarize an empty chain")
    pi = _quantiles(chain.pi)
    pi["median_raw"] = pi["median"]
    pi["median"] = pi["median"] / pi["median"].sum()
    xi = _quantiles(chain.xi)
    xi["prob_positive"] = (chain.xi > 0).mean(axis=0)
    return {"pi": pi, "theta": _quantiles(chain.theta), "xi": xi}


def outcome_probability(chain, klass, covariates) -> dict:
    """Summary of Phi(v' xi_class) over the draws for one covariate profile."""
    K = chain.xi.shape[1]
    if not 0 <= klass < K:
        raise ValidationError(f"class {klass} outside 0..{K - 1}")
    v = np.concatenate([[1.0], np.atleast_1d(np.asarray(covariates, dtype=float))])
    if v.shape[0] != chain.xi.shape[2]:
        raise ValidationError(f"expected {chain.xi.shape[2] - 1} covariates, got {v.shape[0] - 1}")
    return _quantiles(ndtr(chain.xi[:, klass, :] @ v))


# ------------------------------------------------------------------ #
# Unconstrained parameterization
# ------------------------------------------------------------------ #


@dataclass(frozen=True)
class ParamLayout:
    n_classes: int
    levels: np.ndarray
    q: int

    @property
    def n_pi(self):
        return self.n_classes - 1

    @property
    def n_theta(self):
        return int(self.n_classes * np.sum(self.levels - 1))

    @property
    def size(self):
        return self.n_pi + self.n_theta + self.n_classes * self.q

    @property
    def xi_slice(self):
        start = self.n_pi + self.n_theta
        return slice(start, start + self.n_classes * self.q)

    @classmethod
    def for_chain(cls, chain, levels):
        return cls(chain.pi.shape[-1], np.asarray(levels, dtype=np.int64), chain.xi.shape[-1])


def _floor_simplex(p, axis=-1):
    p = np.maximum(p, SIMPLEX_FLOOR)
    return p / p.sum(axis=axis, keepdims=True)


def alr(p):
    """Additive log-ratio transform with the last entry as reference."""
    p = _floor_simplex(np.asarray(p, dtype=float))
    return np.log(p[..., :-1]) - np.log(p[..., -1:])


def inverse_alr(u):
    u = np.asarray(u, dtype=float)
    full = np.concatenate([u, np.zeros(u.shape[:-1] + (1,))], axis=-1)
    return np.exp(full - logsumexp(full, axis=-1, keepdims=True))


def to_unconstrained(pi, theta, xi, levels):
    """Flatten (batched) constrained parameters into unconstrained vectors.

    Leading axes of ``pi`` (..., K), ``theta`` (..., J, K, R) and ``xi``
    (..., K, q) are treated as batch axes.
    """
    levels = np.asarray(levels, dtype=np.int64)
    parts = [alr(pi)]
    for j, Rj in enumerate(levels):
        parts.append(alr(theta[..., j, :, :Rj]).reshape(theta.shape[:-3] + (-1,)))
    parts.append(np.asarray(xi, dtype=float).reshape(xi.shape[:-2] + (-1,)))
    return np.concatenate(parts, axis=-1)


def from_unconstrained(vec, layout: ParamLayout):
    """Inverse of :func:`to_unconstrained`; returns ``(pi, theta, xi)``."""
    vec = np.asarray(vec, dtype=float)
    batch = vec.shape[:-1]
    K, q = layout.n_classes, layout.q
    R = int(layout.levels.max())
    pi = inverse_alr(vec[..., :K - 1])
    theta = np.zeros(batch + (len(layout.levels), K, R))
    pos = K - 1
    for j, Rj in enumerate(layout.levels):
        width = K * (Rj - 1)
        block = vec[..., pos:pos + width].reshape(batch + (K, Rj - 1))
        theta[..., j, :, :Rj] = inverse_alr(block)
        pos += width
    xi = vec[..., layout.xi_slice].reshape(batch + (K, q))
    return pi, theta, xi


# ------------------------------------------------------------------ #
# Observed-data pseudo log-likelihood
# ------------------------------------------------------------------ #


def _joint_terms(vec, layout, data: ModelData):
    pi, theta, xi = from_unconstrained(vec, layout)
    J, K, R = theta.shape
    logtheta = np.log(np.maximum(theta, LOG_FLOOR)).transpose(0, 2, 1).reshape(J * R, K)
    a = data.onehot @ logtheta + np.log(np.maximum(pi, LOG_FLOOR))[None, :]
    eta = None
    if data.supervised:
        eta = linear_predictors(data.V, xi)
        y = data.y[:, None]
        a = a + np.where(y == 1, log_ndtr(eta), log_ndtr(-eta))
    return a, pi, theta, xi, eta


def loglik_individual(vec, layout, data: ModelData):
    """Per-individual marginal log-likelihood, shape (n,)."""
    a = _joint_terms(vec, layout, data)[0]
    return logsumexp(a, axis=1)


def log_prior_unconstrained(vec, layout, prior: PriorSpec):
    """Log prior density of the unconstrained vector, Jacobian included."""
    pi, theta, xi = from_unconstrained(vec, layout)
    lp = float(np.dot(prior.alpha, np.log(pi)))
    for j, Rj in enumerate(layout.levels):
        lp += float(np.sum(prior.eta[:Rj][None, :] * np.log(theta[j, :, :Rj])))
    if layout.q:
        lp -= 0.5 * float(np.sum((xi - prior.mu0[None, :]) ** 2 / prior.sigma0_diag[None, :]))
    return lp


def log_pseudo_posterior_marginal(vec, layout, data: ModelData, prior: PriorSpec):
    return float(np.dot(data.wtilde, loglik_individual(vec, layout, data))
                 + log_prior_unconstrained(vec, layout, prior))


def grad_log_pseudo_posterior(vec, layout, data: ModelData, prior: PriorSpec):
    """Analytic gradient of :func:`log_pseudo_posterior_marginal` (Fisher identity)."""
    a, pi, theta, xi, eta = _joint_terms(vec, layout, data)
    K = layout.n_classes
    resp = np.exp(a - logsumexp(a, axis=1, keepdims=True))
    wr = resp * data.wtilde[:, None]
    wsum = float(data.wtilde.sum())
    grad = np.empty(layout.size)

    alpha = prior.alpha
    grad[:K - 1] = (wr.sum(axis=0) - wsum * pi)[:K - 1] + (alpha - alpha.sum() * pi)[:K - 1]

    R = theta.shape[2]
    J = theta.shape[0]
    cell_w = (data.onehot.T @ wr).reshape(J, R, K).transpose(0, 2, 1)  # (J, K, R)
    class_w = wr.sum(axis=0)
    pos = K - 1
    for j, Rj in enumerate(layout.levels):
        eta_j = prior.eta[:Rj]
        g = cell_w[j, :, :Rj] - class_w[:, None] * theta[j, :, :Rj]
        g = g + eta_j[None, :] - eta_j.sum() * theta[j, :, :Rj]
        grad[pos:pos + K * (Rj - 1)] = g[:, :Rj - 1].ravel()
        pos += K * (Rj - 1)

    if layout.q:
        y = data.y[:, None]
        logphi = -0.5 * eta * eta - 0.5 * np.log(2 * np.pi)
        dlink = np.where(y == 1, np.exp(logphi - log_ndtr(eta)), -np.exp(logphi - log_ndtr(-eta)))
        gx = (wr * dlink).T @ data.V
        gx -= (xi - prior.mu0[None, :]) / prior.sigma0_diag[None, :]
        grad[layout.xi_slice] = gx.ravel()
    return grad


def fd_gradient(f, x, step=1e-5, central=True):
    """Finite-difference gradient of a scalar or vector-valued function.

    For vector-valued ``f`` (shape (n,)) the result has shape (n, d).
    """
    x = np.asarray(x, dtype=float)
    f0 = None if central else np.asarray(f(x))
    cols = []
    for d in range(x.size):
        e = np.zeros_like(x)
        e[d] = step
        if central:
            cols.append((np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2 * step))
        else:
            cols.append((np.asarray(f(x + e)) - f0) / step)
    return np.stack(cols, axis=-1)


def fd_hessian(grad, x, step=1e-5):
    """Central differences of an analytic gradient; returned unsymmetrized."""
    return fd_gradient(grad, x, step=step, central=True)


def individual_scores(vec, layout, data: ModelData, step=1e-5):
    """(n, d) per-individual scores by central differences."""
    return fd_gradient(lambda v: loglik_individual(v, layout, data), vec, step=step)


def psu_bootstrap_multipliers(strata, clusters, n_reps, rng):
    """Rescaled-bootstrap replicate multipliers, shape (n_reps, n).

    Within each stratum ``n_h - 1`` PSUs are drawn with replacement and every
    member of a PSU drawn ``m`` times gets multiplier ``m * n_h / (n_h - 1)``.
    Single-PSU strata keep multiplier one.
    """
    strata = np.asarray(strata)
    psu_keys = np.asarray([f"{s}\x00{c}" for s, c in zip(strata, np.asarray(clusters))])
    psu_ids, psu_of = np.unique(psu_keys, return_inverse=True)
    psu_stratum = np.empty(psu_ids.size, dtype=object)
    psu_stratum[psu_of] = strata
    mult = np.ones((n_reps, psu_ids.size))
    for h in np.unique(strata):
        members = np.flatnonzero(psu_stratum == h)
        n_h = members.size
        if n_h < 2:
            log.warning("stratum %s has a single PSU; it contributes no variance", h)
            continue
        counts = rng.multinomial(n_h - 1, np.full(n_h, 1.0 / n_h), size=n_reps)
        mult[:, members] = counts * (n_h / (n_h - 1.0))
    return mult[:, psu_of]


# ------------------------------------------------------------------ #
# Sandwich rescaling
# ------------------------------------------------------------------ #


@dataclass
class AdjustedChain:
    chain: ChainOutput
    R1: np.ndarray | None
    R2: np.ndarray | None
    theta_bar: np.ndarray | None
    adjusted: bool
    diagnostics: dict = field(default_factory=dict)
    draws_unconstrained: np.ndarray | None = None


def _upper_factor(mat, ridge, relative=True):
    L, used = cholesky_with_ridge(mat, ridge=ridge, max_ridge=1e-4, relative=relative)
    return L.T, used


def rescale_draws(draws, R1, R2, center=None):
    """``(draws - center) R2^-1 R1 + center`` for row-vector draws."""
    center = draws.mean(axis=0) if center is None else center
    white = solve_triangular(R2, (draws - center).T, trans="T", lower=False).T
    return white @ R1 + center


def sandwich_adjust(chain, data: ModelData, prior: PriorSpec, config: McmcConfig, rng,
                    strata, clusters, R1=None, R2=None) -> AdjustedChain:
    """Rescale posterior draws so their covariance matches the sandwich H^-1 J H^-1.

    ``H`` is the negative Hessian of the observed-data log pseudo-posterior at
    the mean unconstrained draw (central differences of the analytic gradient)
    and ``J`` the rescaled-bootstrap covariance of the weighted score total.
    ``R1`` / ``R2`` can be injected; identical factors return the input chain.
    If ``H`` is not positive definite the unadjusted chain is returned flagged.
    """
    chain = chain.chain if isinstance(chain, RelabeledChain) else chain
    levels = data.levels
    layout = ParamLayout.for_chain(chain, levels)
    K = layout.n_classes
    prior_k = prior.with_classes(K, config.fixed_alpha) if prior.alpha.shape[0] != K else prior
    draws = to_unconstrained(chain.pi, chain.theta, chain.xi, levels)
    theta_bar = draws.mean(axis=0)
    diag = {"d": layout.size, "n_draws": int(draws.shape[0]), "n_boot_reps": int(config.n_boot_reps),
            "fd_step": config.fd_step}

    if R1 is not None and R2 is not None and np.array_equal(R1, R2):
        diag.update(skipped=False, note="identical factors; draws returned unchanged")
        return AdjustedChain(chain, R1, R2, theta_bar, True, diag, draws)

    if R2 is None:
        sigma_post = np.cov(draws, rowvar=False, ddof=1).reshape(layout.size, layout.size)
        try:
            R2, ridge2 = _upper_factor(sigma_post, config.ridge)
        except NumericalError:
            diag.update(skipped=True, reason="posterior covariance is not positive definite")
            return AdjustedChain(chain, None, None, theta_bar, False, diag, draws)
        diag["ridge_R2"] = ridge2
        diag["cond_sigma_post"] = float(np.linalg.cond(sigma_post))

    if R1 is None:
        def grad(v):
            return grad_log_pseudo_posterior(v, layout, data, prior_k)

        H = -fd_hessian(grad, theta_bar, step=config.fd_step)
        scale = np.max(np.abs(H))
        diag["hessian_asymmetry"] = float(np.max(np.abs(H - H.T)) / scale) if scale > 0 else 0.0
        H = 0.5 * (H + H.T)
        try:
            Lh, ridge_h = cholesky_with_ridge(H, ridge=config.ridge, max_ridge=1e-4, relative=True)
        except NumericalError:
            diag.update(skipped=True, reason="Hessian is not positive definite")
            log.warning("sandwich adjustment skipped: Hessian is not positive definite")
            return AdjustedChain(chain, None, R2, theta_bar, False, diag, draws)
        diag["ridge_H"] = ridge_h
        diag["cond_H"] = float(np.linalg.cond(H))

        scores = individual_scores(theta_bar, layout, data, step=config.fd_step)
        weighted = scores * data.wtilde[:, None]
        mult = psu_bootstrap_multipliers(strata, clusters, config.n_boot_reps, rng)
        totals = mult @ weighted
        Jmat = np.atleast_2d(np.cov(totals, rowvar=False, ddof=1))
        Hinv = np.linalg.inv(Lh @ Lh.T)
        V = Hinv @ Jmat @ Hinv
        try:
            R1, ridge1 = _upper_factor(V, config.ridge)
        except NumericalError:
            diag.update(skipped=True, reason="sandwich covariance is not positive semidefinite")
            return AdjustedChain(chain, None, R2, theta_bar, False, diag, draws)
        diag["ridge_R1"] = ridge1

    adjusted_u = rescale_draws(draws, R1, R2, center=theta_bar)
    pi, theta, xi = from_unconstrained(adjusted_u, layout)
    out = replace(chain, pi=pi, theta=theta, xi=xi, meta=dict(chain.meta, adjusted=True))
    diag["skipped"] = False
    return AdjustedChain(out, R1, R2, theta_bar, True, diag, adjusted_u)
