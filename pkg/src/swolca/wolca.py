"""Two-step comparator: unsupervised weighted latent class fit, then a
survey-weighted probit regression on the modal class assignments."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats
from scipy.special import log_ndtr, ndtr

from .core import CodingSpec, McmcConfig, NumericalError, PriorSpec, ValidationError, build_design_row
from .gibbs import ChainOutput, ModelData, run_sampler
from .postprocess import RelabeledChain, modal_class, relabel

MAX_NEWTON = 100
GRAD_TOL = 1e-8
SEPARATION_TOL = 1e-10


class ConvergenceError(NumericalError):
    pass


@dataclass
class ProbitFit:
    coef: np.ndarray
    cov: np.ndarray
    se: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    df: int
    n_iter: int
    loglik: float


@dataclass
class WolcaFit:
    step1: RelabeledChain
    modal_class: np.ndarray
    step2: ProbitFit
    k_hat: int

    def xi(self):
        """Step-2 coefficients reshaped to (K, q)."""
        return self.step2.coef.reshape(self.k_hat, -1)


def fit_wolca_step1(data: ModelData, prior: PriorSpec, config: McmcConfig, rng):
    """Weighted latent class fit without the outcome; returns ``(relabeled, modal, adaptive)``."""
    if data.supervised:
        data = ModelData(data.x, data.y, np.zeros((data.n, 0)), data.wtilde, data.levels,
                         data.onehot, False, data.kappa, data.cell)
    prior = PriorSpec(prior.alpha, prior.eta, np.zeros(0), np.ones(0))
    chain, adaptive = run_sampler(data, prior, config, rng)
    rel = relabel(chain, chain.meta["k_hat"], rng)
    modal = modal_class(rel.c, rel.accepted_k)
    return rel, modal, adaptive


def _weighted_loglik(X, y, w, beta):
    eta = X @ beta
    return float(np.sum(w * np.where(y == 1, log_ndtr(eta), log_ndtr(-eta))))


def _score_terms(X, y, beta):
    """Per-unit score multipliers ``g`` (score_i = g_i x_i) and Hessian weights ``h``."""
    eta = X @ beta
    logphi = -0.5 * eta * eta - 0.5 * np.log(2 * np.pi)
    lam1 = np.exp(logphi - log_ndtr(eta))      # phi/Phi
    lam0 = np.exp(logphi - log_ndtr(-eta))     # phi/(1-Phi)
    g = np.where(y == 1, lam1, -lam0)
    # d g / d eta, always negative for the probit
    h = np.where(y == 1, -lam1 * (eta + lam1), -lam0 * (lam0 - eta))
    return g, h


def fit_weighted_probit(X, y, weight, strata, clusters, alpha=0.05) -> ProbitFit:
    """Survey-weighted probit MLE with Taylor-linearized design variance.

    Newton-Raphson with step halving on the normalized weights.  The variance
    is ``H^-1 J H^-1`` with ``J`` built from stratum-centred cluster score
    totals scaled by ``n_h / (n_h - 1)``; intervals use a t quantile with
    ``#clusters - #strata`` degrees of freedom.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=np.int64)
    w = np.asarray(weight, dtype=float)
    w = w / w.mean()
    p = X.shape[1]
    beta = np.zeros(p)
    ll = _weighted_loglik(X, y, w, beta)
    for it in range(1, MAX_NEWTON + 1):
        g, h = _score_terms(X, y, beta)
        grad = X.T @ (w * g)
        if np.max(np.abs(grad)) < GRAD_TOL:
            break
        hess = -(X * (w * h)[:, None]).T @ X
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            raise ConvergenceError("singular information matrix in probit fit") from None
        t = 1.0
        while True:
            cand = beta + t * step
            ll_new = _weighted_loglik(X, y, w, cand)
            if np.isfinite(ll_new) and ll_new >= ll - 1e-12:
                break
            t *= 0.5
            if t < 1e-10:
                raise ConvergenceError("step halving failed to increase the likelihood")
        beta, ll = cand, ll_new
        fitted = ndtr(X @ beta)
        if np.any(fitted < SEPARATION_TOL) or np.any(fitted > 1 - SEPARATION_TOL):
            if np.max(np.abs(beta)) > 8:
                raise ConvergenceError("fitted probabilities pinned at 0 or 1 (separation)")
    else:
        raise ConvergenceError(f"probit fit did not converge in {MAX_NEWTON} iterations")

    g, h = _score_terms(X, y, beta)
    info = -(X * (w * h)[:, None]).T @ X
    scores = X * (w * g)[:, None]
    meat, df = _linearized_meat(scores, strata, clusters)
    info_inv = np.linalg.inv(info)
    cov = info_inv @ meat @ info_inv
    cov = 0.5 * (cov + cov.T)
    se = np.sqrt(np.clip(np.diag(cov), 0, None))
    tq = stats.t.ppf(1 - alpha / 2, df)
    return ProbitFit(beta, cov, se, beta - tq * se, beta + tq * se, df, it, ll)


def _linearized_meat(scores, strata, clusters):
    strata = np.asarray(strata)
    clusters = np.asarray(clusters)
    meat = np.zeros((scores.shape[1], scores.shape[1]))
    n_clusters = 0
    uniq_strata = np.unique(strata)
    for h in uniq_strata:
        in_h = strata == h
        ids, inv = np.unique(clusters[in_h], return_inverse=True)
        totals = np.zeros((ids.size, scores.shape[1]))
        np.add.at(totals, inv, scores[in_h])
        n_h = ids.size
        n_clusters += n_h
        if n_h < 2:
            continue
        centred = totals - totals.mean(axis=0)
        meat += n_h / (n_h - 1.0) * centred.T @ centred
    df = n_clusters - uniq_strata.size
    if df <= 0:
        raise ValidationError("design has no degrees of freedom (#clusters - #strata <= 0)")
    return meat, df


def step2_design(modal, covariates, n_classes):
    covariates = np.asarray(covariates, dtype=float).reshape(len(modal), -1)
    coding = CodingSpec(n_classes, covariates.shape[1])
    return np.vstack([build_design_row(int(k), v, coding) for k, v in zip(modal, covariates)])


def fit_wolca(data: ModelData, covariates, weight, strata, clusters, prior: PriorSpec,
              config: McmcConfig, rng) -> WolcaFit:
    rel, modal, _ = fit_wolca_step1(data, prior, config, rng)
    K = rel.accepted_k
    empty = np.setdiff1d(np.arange(K), modal)
    if empty.size:
        raise ConvergenceError(f"classes {empty.tolist()} have no modal members")
    X = step2_design(modal, covariates, K)
    fit = fit_weighted_probit(X, data.y, weight, strata, clusters)
    return WolcaFit(rel, modal, fit, K)


def step1_chain(fit: WolcaFit) -> ChainOutput:
    return fit.step1.chain
