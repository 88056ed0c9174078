"""scikit-learn style estimators wrapping the samplers.

Items are passed as integer codes ``1..R_j``; predicted classes are 0-based.
"""

from __future__ import annotations

import logging

import numpy as np
from scipy import stats
from scipy.special import log_ndtr, logsumexp, ndtr
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .core import McmcConfig, PriorSpec, SurveyDataset, ValidationError, check_dataset
from .distributions import make_rng
from .gibbs import ModelData, run_sampler
from .postprocess import outcome_probability, relabel, sandwich_adjust, summarize
from .wolca import fit_wolca

log = logging.getLogger(__name__)

SAMPLER_STREAM, RELABEL_STREAM, BOOT_STREAM = 0, 1, 2


def make_dataset(X, y=None, covariates=None, sample_weight=None, strata=None, clusters=None,
                 item_levels=None) -> SurveyDataset:
    """Validate array inputs and bundle them into a :class:`SurveyDataset`."""
    X = check_array(X, dtype=np.int64, ensure_min_samples=1)
    n = X.shape[0]
    y = np.zeros(n, dtype=np.int64) if y is None else np.asarray(y).ravel()
    if covariates is None:
        cov = np.zeros((n, 0))
    else:
        cov = check_array(np.asarray(covariates, dtype=float).reshape(n, -1), ensure_min_features=0)
    w = np.ones(n) if sample_weight is None else np.asarray(sample_weight, dtype=float).ravel()
    s = np.ones(n, dtype=np.int64) if strata is None else np.asarray(strata).ravel()
    cl = np.arange(1, n + 1) if clusters is None else np.asarray(clusters).ravel()
    levels = X.max(axis=0) if item_levels is None else np.asarray(item_levels, dtype=np.int64)
    return check_dataset(SurveyDataset(X, y, cov, w, s, cl, levels))


class _LatentClassBase(BaseEstimator):
    weighted = True
    supervised = True

    def __init__(self, n_iter=20000, n_burn=10000, thin=5, k_max=30, class_cutoff=0.05,
                 n_boot_reps=100, fd_step=1e-5, ridge=1e-8, k_fixed=None, random_state=0):
        self.n_iter = n_iter
        self.n_burn = n_burn
        self.thin = thin
        self.k_max = k_max
        self.class_cutoff = class_cutoff
        self.n_boot_reps = n_boot_reps
        self.fd_step = fd_step
        self.ridge = ridge
        self.k_fixed = k_fixed
        self.random_state = random_state

    def _config(self, adjust=False):
        return McmcConfig(n_iter=self.n_iter, n_burn=self.n_burn, thin=self.thin,
                          seed=int(self.random_state), k_max=self.k_max, class_cutoff=self.class_cutoff,
                          adjust_variance=adjust, n_boot_reps=self.n_boot_reps, fd_step=self.fd_step,
                          ridge=self.ridge)

    def fit(self, X, y=None, covariates=None, sample_weight=None, strata=None, clusters=None,
            item_levels=None):
        """Fit on item codes ``X`` (n, J) and binary outcome ``y``."""
        if self.supervised and y is None:
            raise ValidationError(f"{type(self).__name__} needs an outcome y")
        ds = make_dataset(X, y, covariates, sample_weight, strata, clusters, item_levels)
        return self.fit_dataset(ds)

    def fit_dataset(self, ds: SurveyDataset):
        raise NotImplementedError

    def _record(self, ds, rel, config):
        self.dataset_info_ = {"n": ds.n, "n_items": ds.n_items, "covariate_names": list(ds.covariate_names)}
        self.n_features_in_ = ds.n_items
        self.item_levels_ = np.asarray(ds.item_levels)
        self.relabeled_ = rel
        self.k_hat_ = int(rel.accepted_k)
        self.config_ = config

    # -- prediction ------------------------------------------------- #

    def _class_logits(self, X, y=None, covariates=None):
        check_is_fitted(self, "summary_")
        X = check_array(X, dtype=np.int64)
        if X.shape[1] != self.n_features_in_:
            raise ValidationError(f"expected {self.n_features_in_} items, got {X.shape[1]}")
        if np.any(X < 1) or np.any(X > self.item_levels_[None, :]):
            raise ValidationError("item codes outside 1..R_j")
        pi = self.summary_["pi"]["median"]
        theta = self.summary_["theta"]["median"]
        theta = theta / theta.sum(axis=2, keepdims=True)
        logit = np.log(np.maximum(pi, 1e-300))[None, :].repeat(X.shape[0], axis=0)
        for j in range(X.shape[1]):
            logit += np.log(np.maximum(theta[j][:, X[:, j] - 1].T, 1e-300))
        if y is not None and self.supervised:
            n = X.shape[0]
            cov = np.zeros((n, 0)) if covariates is None else np.asarray(covariates, dtype=float).reshape(n, -1)
            V = np.column_stack([np.ones(n), cov])
            xi = self.summary_["xi"]["median"]
            if V.shape[1] != xi.shape[1]:
                raise ValidationError(f"expected {xi.shape[1] - 1} covariates, got {V.shape[1] - 1}")
            eta = V @ xi.T
            yy = np.asarray(y).reshape(-1, 1)
            logit += np.where(yy == 1, log_ndtr(eta), log_ndtr(-eta))
        return logit

    def predict_proba(self, X, y=None, covariates=None):
        """Posterior class probabilities at the posterior-median parameters.

        The outcome term is included when ``y`` is given.
        """
        logit = self._class_logits(X, y, covariates)
        return np.exp(logit - logsumexp(logit, axis=1, keepdims=True))

    def predict(self, X, y=None, covariates=None):
        return self.predict_proba(X, y, covariates).argmax(axis=1)

    def transform(self, X, y=None, covariates=None):
        return self.predict_proba(X, y, covariates)

    def outcome_probability(self, klass, covariates=()):
        """Median and 95% interval of Phi(v'xi) for class ``klass`` (0-based)."""
        check_is_fitted(self, "summary_")
        return outcome_probability(self.chain_, klass, covariates)


class SWOLCA(_LatentClassBase):
    """Survey-weighted supervised overfitted latent class model."""

    def __init__(self, n_iter=20000, n_burn=10000, thin=5, k_max=30, class_cutoff=0.05,
                 n_boot_reps=100, fd_step=1e-5, ridge=1e-8, k_fixed=None, random_state=0,
                 adjust_variance=True):
        super().__init__(n_iter, n_burn, thin, k_max, class_cutoff, n_boot_reps, fd_step, ridge,
                         k_fixed, random_state)
        self.adjust_variance = adjust_variance

    def fit_dataset(self, ds: SurveyDataset):
        check_dataset(ds)
        config = self._config(adjust=self.adjust_variance and self.weighted)
        data = ModelData.from_dataset(ds, weighted=self.weighted, supervised=True)
        prior = PriorSpec.default(config.k_max, data.n_levels, data.q)
        chain, adaptive = run_sampler(data, prior, config, make_rng(config.seed, SAMPLER_STREAM),
                                      k_fixed=self.k_fixed)
        rel = relabel(chain, chain.meta["k_hat"], make_rng(config.seed, RELABEL_STREAM))
        self._record(ds, rel, config)
        self.adaptive_nonempty_ = chain.meta.get("adaptive_nonempty")
        self.unadjusted_summary_ = summarize(rel.chain)
        self.adjusted_ = False
        self.diagnostics_ = {"skipped": True, "reason": "adjustment disabled"}
        self.chain_ = rel.chain
        if config.adjust_variance:
            adj = sandwich_adjust(rel.chain, data, prior, config, make_rng(config.seed, BOOT_STREAM),
                                  ds.stratum, ds.cluster)
            self.adjusted_ = adj.adjusted
            self.diagnostics_ = adj.diagnostics
            self.chain_ = adj.chain
            self.R1_, self.R2_ = adj.R1, adj.R2
        self.summary_ = summarize(self.chain_)
        return self


class SOLCA(SWOLCA):
    """Unweighted supervised overfitted latent class model (weights ignored)."""

    weighted = False

    def __init__(self, n_iter=20000, n_burn=10000, thin=5, k_max=30, class_cutoff=0.05,
                 n_boot_reps=100, fd_step=1e-5, ridge=1e-8, k_fixed=None, random_state=0):
        super().__init__(n_iter, n_burn, thin, k_max, class_cutoff, n_boot_reps, fd_step, ridge,
                         k_fixed, random_state, adjust_variance=False)


class WOLCA(_LatentClassBase):
    """Two-step comparator: weighted unsupervised fit, then weighted probit."""

    def fit_dataset(self, ds: SurveyDataset):
        check_dataset(ds)
        config = self._config()
        data = ModelData.from_dataset(ds, weighted=True, supervised=False)
        prior = PriorSpec.default(config.k_max, data.n_levels, 0)
        fit = fit_wolca(data, ds.covariates, ds.weight, ds.stratum, ds.cluster, prior, config,
                        make_rng(config.seed, SAMPLER_STREAM))
        self._record(ds, fit.step1, config)
        self.fit_ = fit
        self.modal_class_ = fit.modal_class
        self.chain_ = fit.step1.chain
        summary = summarize(fit.step1.chain)
        K = fit.k_hat
        step2 = fit.step2
        summary["xi"] = {
            "median": step2.coef.reshape(K, -1),
            "lower": step2.lower.reshape(K, -1),
            "upper": step2.upper.reshape(K, -1),
            "se": step2.se.reshape(K, -1),
            "df": step2.df,
            "interval": "wald",
        }
        self.summary_ = summary
        self.unadjusted_summary_ = None
        self.adjusted_ = False
        self.diagnostics_ = {"skipped": True, "reason": "two-step model uses design-based Wald intervals"}
        return self

    def predict_proba(self, X, y=None, covariates=None):
        # the latent classes of the two-step model do not depend on the outcome
        return super().predict_proba(X, None, None)

    def outcome_probability(self, klass, covariates=()):
        check_is_fitted(self, "summary_")
        v = np.concatenate([[1.0], np.atleast_1d(np.asarray(covariates, dtype=float))])
        K = self.k_hat_
        if not 0 <= klass < K:
            raise ValidationError(f"class {klass} outside 0..{K - 1}")
        q = v.size
        sl = slice(klass * q, (klass + 1) * q)
        est = float(v @ self.fit_.step2.coef[sl])
        se = float(np.sqrt(v @ self.fit_.step2.cov[sl, sl] @ v))
        tq = stats.t.ppf(0.975, self.fit_.step2.df)
        return {"median": ndtr(est), "lower": ndtr(est - tq * se), "upper": ndtr(est + tq * se)}
