"""Synthetic survey populations, sampling designs, scenario runner and the
bias / interval-width / coverage metrics used to evaluate the estimators."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
from scipy.optimize import linear_sum_assignment
from scipy.special import ndtr, ndtri

from .core import McmcConfig, SurveyDataset, ValidationError
from .distributions import draw_categorical, make_rng

log = logging.getLogger(__name__)

# 1-based modal level per item for the three default patterns
DEFAULT_PATTERNS = np.array(
    [[1] * 15 + [3] * 15,
     [4] * 6 + [2] * 24,
     [3] * 9 + [4] * 12 + [1] * 9]
).T


def overlap_patterns(differing_items=5):
    """Classes 1 and 2 share pattern 1 except on the first ``differing_items`` items."""
    pat = DEFAULT_PATTERNS.copy()
    pat[:, 1] = pat[:, 0]
    pat[:differing_items, 1] = 2
    return pat


@dataclass(frozen=True)
class PopulationSpec:
    stratum_sizes: tuple = (20000, 60000)
    class_probs_by_stratum: tuple = ((0.2, 0.4, 0.4), (0.7, 0.2, 0.1))
    n_levels: int = 4
    modal_patterns: np.ndarray = field(default_factory=lambda: DEFAULT_PATTERNS.copy())
    mode_prob: float = 0.85
    # linear predictor per (class, stratum)
    xi_true: tuple = ((1.0, 0.5), (0.3, -0.7), (-0.5, -1.3))
    cluster_size: int = 50
    latent_corr: float = 0.5
    clustered_outcome: bool = False
    extra_covariates: bool = False
    extra_coefs: tuple = (0.3, -0.2)

    @property
    def N(self):
        return int(sum(self.stratum_sizes))

    @property
    def n_classes(self):
        return len(self.class_probs_by_stratum[0])

    @property
    def n_items(self):
        return self.modal_patterns.shape[0]

    @property
    def population_pi(self):
        sizes = np.asarray(self.stratum_sizes, dtype=float)
        return (sizes / sizes.sum()) @ np.asarray(self.class_probs_by_stratum)

    def theta(self):
        """(J, K, R) generating item-level probabilities."""
        J, K, R = self.n_items, self.n_classes, self.n_levels
        th = np.full((J, K, R), (1.0 - self.mode_prob) / (R - 1))
        jj, kk = np.meshgrid(np.arange(J), np.arange(K), indexing="ij")
        th[jj, kk, self.modal_patterns - 1] = self.mode_prob
        return th

    def conditional_xi(self):
        """Truth in the fitted coding: per class (intercept, stratum-2 slope)."""
        lp = np.asarray(self.xi_true, dtype=float)
        return np.column_stack([lp[:, 0], lp[:, 1] - lp[:, 0]])

    def validate(self):
        probs = np.asarray(self.class_probs_by_stratum, dtype=float)
        if probs.shape[0] != len(self.stratum_sizes):
            raise ValidationError("need one class-probability vector per stratum")
        if np.any(probs < 0) or np.any(np.abs(probs.sum(axis=1) - 1) > 1e-9):
            raise ValidationError("stratum class probabilities must be simplexes")
        if self.modal_patterns.shape[1] != probs.shape[1]:
            raise ValidationError("modal_patterns must have one column per class")
        if np.any(self.modal_patterns < 1) or np.any(self.modal_patterns > self.n_levels):
            raise ValidationError("modal levels outside 1..n_levels")
        if not 0 < self.mode_prob < 1:
            raise ValidationError("mode_prob must lie in (0, 1)")
        if any(s % self.cluster_size for s in self.stratum_sizes):
            raise ValidationError("stratum sizes must be multiples of the cluster size")
        if not 0 <= self.latent_corr <= 1:
            raise ValidationError("latent_corr must lie in [0, 1]")
        return self


@dataclass
class Population:
    spec: PopulationSpec
    items: np.ndarray
    klass: np.ndarray
    stratum: np.ndarray
    cluster: np.ndarray
    outcome: np.ndarray
    prob: np.ndarray
    extra: np.ndarray

    @property
    def N(self):
        return self.items.shape[0]

    def realized_pi(self):
        return np.bincount(self.klass, minlength=self.spec.n_classes) / self.N

    def realized_theta(self):
        J, K, R = self.spec.n_items, self.spec.n_classes, self.spec.n_levels
        th = np.zeros((J, K, R))
        for k in range(K):
            rows = self.items[self.klass == k] - 1
            for j in range(J):
                th[j, k] = np.bincount(rows[:, j], minlength=R) / max(rows.shape[0], 1)
        return th

    def marginal_xi(self):
        """Class-specific probit intercepts matching the realized outcome rate."""
        K = self.spec.n_classes
        rates = np.array([self.outcome[self.klass == k].mean() for k in range(K)])
        return ndtri(rates)[:, None]


def correlated_outcomes(p, groups, rho, rng):
    """Binary outcomes with exchangeable latent correlation ``rho`` within groups.

    ``y_i = 1`` iff ``sqrt(rho) u_g + sqrt(1 - rho) e_i <= Phi^-1(p_i)`` with one
    shared ``u_g`` per group, so ``P(y_i = 1) = p_i`` exactly.
    """
    p = np.asarray(p, dtype=float)
    if np.any(~((p > 0) & (p < 1))):
        raise ValidationError("outcome probabilities must lie strictly inside (0, 1)")
    if not 0 <= rho <= 1:
        raise ValidationError("rho must lie in [0, 1]")
    _, gidx = np.unique(np.asarray(groups), return_inverse=True)
    u = rng.standard_normal(gidx.max() + 1)
    e = rng.standard_normal(p.shape[0])
    latent = np.sqrt(rho) * u[gidx] + np.sqrt(1.0 - rho) * e
    return (latent <= ndtri(p)).astype(np.int64)


def generate_population(spec: PopulationSpec, rng) -> Population:
    spec.validate()
    sizes = np.asarray(spec.stratum_sizes)
    stratum = np.repeat(np.arange(len(sizes)), sizes)
    N = stratum.shape[0]
    probs = np.asarray(spec.class_probs_by_stratum, dtype=float)
    klass = draw_categorical(probs[stratum], rng)

    # clusters: random blocks of cluster_size within each stratum
    cluster = np.empty(N, dtype=np.int64)
    offset = 0
    for h, size in enumerate(sizes):
        members = np.flatnonzero(stratum == h)
        order = rng.permutation(members)
        n_cl = size // spec.cluster_size
        cluster[order] = offset + np.arange(size) // spec.cluster_size
        offset += n_cl

    theta = spec.theta()
    J = spec.n_items
    items = np.empty((N, J), dtype=np.int64)
    for j in range(J):
        items[:, j] = draw_categorical(theta[j, klass], rng) + 1

    lp = np.asarray(spec.xi_true, dtype=float)[klass, stratum]
    extra = np.zeros((N, 0))
    if spec.extra_covariates:
        extra = np.column_stack([rng.binomial(1, 0.5, N).astype(float), rng.standard_normal(N)])
        lp = lp + extra @ np.asarray(spec.extra_coefs, dtype=float)
    prob = ndtr(lp)
    if spec.clustered_outcome:
        outcome = correlated_outcomes(prob, cluster, spec.latent_corr, rng)
    else:
        outcome = (rng.random(N) < prob).astype(np.int64)
    return Population(spec, items, klass, stratum, cluster, outcome, prob, extra)


DESIGNS = ("srs", "stratified", "stratified-cluster")


@dataclass
class Sample:
    dataset: SurveyDataset
    index: np.ndarray
    klass: np.ndarray


def draw_sample(pop: Population, design: str, n: int, rng, covariates="stratum") -> Sample:
    """Draw a sample and attach design weights.

    ``covariates`` is ``"stratum"`` (stratum-2 indicator), ``"none"`` or
    ``"extra"`` (stratum indicator plus the population's extra covariates).
    """
    design = design.lower()
    N = pop.N
    strata_ids = np.unique(pop.stratum)
    H = strata_ids.size
    if n > N or n < 1:
        raise ValidationError(f"sample size {n} not feasible for population of {N}")
    if design == "srs":
        idx = np.sort(rng.choice(N, size=n, replace=False))
        weight = np.full(n, N / n)
    elif design in ("stratified", "stratified-cluster"):
        if n % H:
            raise ValidationError("sample size must split evenly across strata")
        n_h = n // H
        parts, wparts = [], []
        for h in strata_ids:
            members = np.flatnonzero(pop.stratum == h)
            if n_h > members.size:
                raise ValidationError(f"stratum {h} has only {members.size} units")
            if design == "stratified":
                chosen = np.sort(rng.choice(members, size=n_h, replace=False))
                w = members.size / n_h
            else:
                size = pop.spec.cluster_size
                if n_h % size:
                    raise ValidationError("per-stratum sample size must be a multiple of the cluster size")
                clusters = np.unique(pop.cluster[members])
                m = n_h // size
                if m > clusters.size:
                    raise ValidationError(f"stratum {h} has only {clusters.size} clusters")
                picked = rng.choice(clusters, size=m, replace=False)
                chosen = np.sort(members[np.isin(pop.cluster[members], picked)])
                w = clusters.size / m
            parts.append(chosen)
            wparts.append(np.full(chosen.size, w))
        idx = np.concatenate(parts)
        weight = np.concatenate(wparts)
    else:
        raise ValidationError(f"unknown design {design!r}; expected one of {DESIGNS}")

    stratum = pop.stratum[idx]
    if design == "stratified-cluster":
        cluster = pop.cluster[idx]
    else:
        cluster = np.arange(idx.size)  # every unit is its own PSU
    if covariates == "none":
        cov, names = np.zeros((idx.size, 0)), ()
    elif covariates == "stratum":
        cov, names = (stratum == strata_ids[-1]).astype(float)[:, None], ("stratum2",)
    elif covariates == "extra":
        cov = np.column_stack([(stratum == strata_ids[-1]).astype(float), pop.extra[idx]])
        names = ("stratum2", "binary_cov", "normal_cov")
    else:
        raise ValidationError(f"unknown covariate set {covariates!r}")
    ds = SurveyDataset(
        items=pop.items[idx], outcome=pop.outcome[idx], covariates=cov, weight=weight,
        stratum=stratum + 1, cluster=cluster + 1, item_levels=np.full(pop.spec.n_items, pop.spec.n_levels),
        covariate_names=names,
    )
    return Sample(ds, idx, pop.klass[idx])


# ------------------------------------------------------------------ #
# Scenarios
# ------------------------------------------------------------------ #


@dataclass(frozen=True)
class ScenarioSpec:
    id: int = 2
    design: str = "stratified"
    association: str = "conditional"
    n: int = 4000
    pattern: str = "mode85"
    replicates: int = 20
    seed: int = 2024

    def population_spec(self) -> PopulationSpec:
        kwargs = {}
        if self.pattern == "mode55":
            kwargs["mode_prob"] = 0.55
        elif self.pattern == "overlap":
            kwargs["modal_patterns"] = overlap_patterns()
        elif self.pattern != "mode85":
            raise ValidationError(f"unknown pattern setting {self.pattern!r}")
        if self.design == "stratified-cluster":
            kwargs["clustered_outcome"] = True
        if self.association == "additional":
            kwargs["extra_covariates"] = True
        return PopulationSpec(**kwargs)

    @property
    def covariates(self):
        return {"conditional": "stratum", "marginal": "none", "additional": "extra"}[self.association]

    def validate(self):
        if self.design not in DESIGNS:
            raise ValidationError(f"unknown design {self.design!r}")
        if self.association not in ("conditional", "marginal", "additional"):
            raise ValidationError(f"unknown association {self.association!r}")
        if self.replicates < 1:
            raise ValidationError("replicates must be at least 1")
        self.population_spec().validate()
        return self


SCENARIOS = {
    1: ScenarioSpec(1, "srs"),
    2: ScenarioSpec(2, "stratified"),
    3: ScenarioSpec(3, "stratified-cluster"),
    4: ScenarioSpec(4, "stratified", association="marginal"),
    5: ScenarioSpec(5, "stratified", association="additional"),
    6: ScenarioSpec(6, "stratified", n=8000),
    7: ScenarioSpec(7, "stratified", n=800),
    8: ScenarioSpec(8, "stratified", pattern="mode55"),
    9: ScenarioSpec(9, "stratified", pattern="overlap"),
}


def get_scenario(scenario_id, **overrides) -> ScenarioSpec:
    try:
        base = SCENARIOS[int(scenario_id)]
    except (KeyError, ValueError):
        raise ValidationError(f"scenario must be one of 1..9, got {scenario_id!r}") from None
    return replace(base, **overrides).validate()


@dataclass
class Truth:
    pi: np.ndarray
    theta: np.ndarray
    xi: np.ndarray
    n_classes: int


def scenario_truth(spec: ScenarioSpec, pop: Population) -> Truth:
    """Population quantities the fitted parameters are compared against.

    pi and theta are the realized population shares/frequencies; xi is the
    conditional coefficient truth, or for marginal scenarios the probit
    inversion of the realized class-specific outcome rates.
    """
    ps = pop.spec
    if spec.association == "marginal":
        xi = pop.marginal_xi()
    else:
        xi = ps.conditional_xi()
        if spec.association == "additional":
            coefs = np.broadcast_to(np.asarray(ps.extra_coefs, dtype=float), (ps.n_classes, 2))
            xi = np.column_stack([xi, coefs])
    return Truth(pop.realized_pi(), pop.realized_theta(), xi, ps.n_classes)


def align_classes(theta_hat, theta_true):
    """Permutation ``sigma`` with ``theta_hat[:, sigma[k]]`` matched to true class ``k``.

    Minimizes the summed L1 distance by optimal assignment.  If fewer classes
    were estimated than exist, unmatched true classes get ``-1``.
    """
    th, tt = np.asarray(theta_hat, dtype=float), np.asarray(theta_true, dtype=float)
    R = min(th.shape[2], tt.shape[2])
    cost = np.abs(tt[:, :, None, :R] - th[:, None, :, :R]).sum(axis=(0, 3))  # (K_true, K_hat)
    rows, cols = linear_sum_assignment(cost)
    sigma = np.full(tt.shape[1], -1, dtype=np.int64)
    sigma[rows] = cols
    return sigma


@dataclass
class MetricsReport:
    """Per model: block -> {bias, width, coverage}; plus K bias and replicate counts."""

    models: dict

    def to_dict(self):
        return {"models": self.models}


BLOCKS = ("pi", "theta", "xi")


def fit_errors(summary: dict, truth: Truth, k_hat: int):
    """Per-cell absolute errors, widths and coverage indicators of one fit.

    ``summary`` uses :func:`postprocess.summarize` layout (xi may be a Wald
    block with the same keys).  Classes are aligned on theta first.
    """
    sigma = align_classes(summary["theta"]["median"], truth.theta)
    matched = sigma >= 0
    out = {}
    for block in BLOCKS:
        s = summary[block]
        true = getattr(truth, block)
        if block == "pi":
            est = [s["median"][sigma[matched]], s["lower"][sigma[matched]], s["upper"][sigma[matched]]]
            true = true[matched]
        elif block == "theta":
            est = [s[key][:, sigma[matched], :] for key in ("median", "lower", "upper")]
            true = true[:, matched, :]
        else:
            est = [s[key][sigma[matched]] for key in ("median", "lower", "upper")]
            true = true[matched]
        med, lo, hi = (np.asarray(e, dtype=float) for e in est)
        if block == "theta":
            # absent levels are padded with zeros; keep the observed ones
            med, lo, hi, true = (a[..., :truth.theta.shape[2]] for a in (med, lo, hi, true))
        out[block] = {
            "bias": np.abs(med - true).ravel(),
            "width": (hi - lo).ravel(),
            "cover": ((lo <= true) & (true <= hi)).ravel().astype(float),
        }
    out["k_bias"] = abs(int(k_hat) - truth.n_classes)
    return out


def compute_metrics(fits: dict) -> MetricsReport:
    """Aggregate per-replicate :func:`fit_errors` outputs.

    ``fits`` maps model name to a list of fit_errors dicts.  Each block metric
    is the mean over all replicate-by-class (and item/level) cells.
    """
    if not fits or all(len(v) == 0 for v in fits.values()):
        raise ValidationError("no fits to summarize")
    models = {}
    for name, rows in fits.items():
        if not rows:
            continue
        entry = {"replicates": len(rows), "K": {"bias": float(np.mean([r["k_bias"] for r in rows]))}}
        for block in BLOCKS:
            entry[block] = {
                "bias": float(np.mean(np.concatenate([r[block]["bias"] for r in rows]))),
                "width": float(np.mean(np.concatenate([r[block]["width"] for r in rows]))),
                "coverage": float(np.mean(np.concatenate([r[block]["cover"] for r in rows]))),
            }
        models[name] = entry
    return MetricsReport(models)


MODELS = ("SOLCA", "WOLCA", "SWOLCA")


def fit_replicate(model: str, ds: SurveyDataset, config: McmcConfig, seed: int):
    """Fit one model; returns a list of ``(label, summary, k_hat)`` entries.

    SWOLCA also reports its unadjusted intervals (same chain) as
    ``SWOLCA-unadj``.
    """
    from .estimators import SOLCA, SWOLCA, WOLCA

    model = model.upper()
    kw = dict(n_iter=config.n_iter, n_burn=config.n_burn, thin=config.thin, k_max=config.k_max,
              class_cutoff=config.class_cutoff, n_boot_reps=config.n_boot_reps, random_state=seed)
    if model == "SWOLCA":
        est = SWOLCA(adjust_variance=config.adjust_variance, **kw).fit_dataset(ds)
        rows = [("SWOLCA", est.summary_, est.k_hat_)]
        if est.unadjusted_summary_ is not None and est.adjusted_:
            rows.append(("SWOLCA-unadj", est.unadjusted_summary_, est.k_hat_))
        return rows
    if model == "SOLCA":
        est = SOLCA(**kw).fit_dataset(ds)
        return [("SOLCA", est.summary_, est.k_hat_)]
    if model == "WOLCA":
        est = WOLCA(**kw).fit_dataset(ds)
        return [("WOLCA", est.summary_, est.k_hat_)]
    raise ValidationError(f"unknown model {model!r}; expected one of {MODELS}")


def _replicate_job(spec, pop, truth, models, config, rep):
    rng = make_rng(spec.seed, 1000 + rep)
    sample = draw_sample(pop, spec.design, spec.n, rng, covariates=spec.covariates)
    rows, failures = [], []
    for i, model in enumerate(models):
        try:
            for label, summary, k_hat in fit_replicate(model, sample.dataset, config,
                                                       seed=spec.seed * 7919 + rep * 31 + i):
                rows.append((label, rep, fit_errors(summary, truth, k_hat), summary, k_hat))
        except Exception as exc:  # noqa: BLE001 - logged and counted
            log.warning("replicate %d model %s failed: %s", rep, model, exc)
            failures.append((model, rep, str(exc)))
    return rows, failures


def default_n_jobs():
    try:
        return max(1, int(os.environ.get("SWOLCA_N_JOBS", "1")))
    except ValueError:
        return 1


@dataclass
class ScenarioResult:
    spec: ScenarioSpec
    metrics: MetricsReport
    replicates: pd.DataFrame
    failures: list
    truth: Truth
    # label -> {replicate: summary}
    summaries: dict = field(default_factory=dict)


def run_scenario(spec: ScenarioSpec, models=MODELS, config: McmcConfig | None = None, n_jobs=None,
                 population: Population | None = None) -> ScenarioResult:
    """Generate the population once, then fit every model on each replicate sample."""
    spec.validate()
    config = config or McmcConfig(n_iter=4000, n_burn=2000, thin=5)
    pop = population or generate_population(spec.population_spec(), make_rng(spec.seed, 0))
    truth = scenario_truth(spec, pop)
    n_jobs = default_n_jobs() if n_jobs is None else n_jobs
    models = [m.upper() for m in models]
    if n_jobs > 1:
        from joblib import Parallel, delayed

        results = Parallel(n_jobs=n_jobs)(
            delayed(_replicate_job)(spec, pop, truth, models, config, r) for r in range(spec.replicates))
    else:
        results = [_replicate_job(spec, pop, truth, models, config, r) for r in range(spec.replicates)]

    fits, records, failures, summaries = {}, [], [], {}
    for rows, fails in results:
        failures.extend(fails)
        for label, rep, err, summary, k_hat in rows:
            fits.setdefault(label, []).append(err)
            summaries.setdefault(label, {})[rep] = summary
            rec = {"model": label, "replicate": rep, "k_hat": k_hat}
            for block in BLOCKS:
                rec[f"{block}_bias"] = float(err[block]["bias"].mean())
                rec[f"{block}_width"] = float(err[block]["width"].mean())
                rec[f"{block}_coverage"] = float(err[block]["cover"].mean())
            records.append(rec)
    metrics = compute_metrics(fits)
    for name, entry in metrics.models.items():
        entry["failed"] = sum(1 for m, _, _ in failures if m == name)
    table = pd.DataFrame.from_records(records)
    if not table.empty:
        table = table.sort_values(["model", "replicate"], kind="stable").reset_index(drop=True)
    return ScenarioResult(spec, metrics, table, failures, truth, summaries)


def toy_population_spec() -> PopulationSpec:
    """Small two-class setting used for the bundled example CSV."""
    return PopulationSpec(
        stratum_sizes=(300, 900),
        class_probs_by_stratum=((0.5, 0.5), (0.5, 0.5)),
        modal_patterns=np.array([[1, 4], [1, 4], [2, 3], [2, 3]]),
        mode_prob=0.9,
        xi_true=((0.8, 0.3), (-0.6, -1.0)),
        cluster_size=10,
    )


def toy_dataset(seed=11, n=60) -> SurveyDataset:
    pop = generate_population(toy_population_spec(), make_rng(seed, 0))
    return draw_sample(pop, "stratified", n, make_rng(seed, 1)).dataset
