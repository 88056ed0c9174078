"""Domain types, validation, weight normalization and mixture reference coding.

Class and category indices are 0-based everywhere in the Python API.  Item
codes inside a :class:`SurveyDataset` keep the 1..R_j convention of the CSV
files; they are shifted once, in :meth:`SurveyDataset.item_index`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd


class ValidationError(ValueError):
    """Raised when input data violates a dataset or parameter invariant."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class NumericalError(RuntimeError):
    """Raised when a numerical routine (Cholesky, normalization) breaks down."""


# ------------------------------------------------------------------ #
# Dataset
# ------------------------------------------------------------------ #


@dataclass(frozen=True)
class SurveyDataset:
    items: np.ndarray
    outcome: np.ndarray
    covariates: np.ndarray
    weight: np.ndarray
    stratum: np.ndarray
    cluster: np.ndarray
    item_levels: np.ndarray
    covariate_names: tuple = ()

    def __post_init__(self):
        items = np.asarray(self.items)
        if items.ndim != 2:
            raise ValidationError("items must be an n x J matrix")
        n = items.shape[0]
        cov = np.asarray(self.covariates, dtype=float)
        if cov.size == 0:
            cov = np.zeros((n, 0))
        elif cov.ndim == 1:
            cov = cov[:, None]
        levels = self.item_levels
        if levels is None:
            levels = items.max(axis=0)
        object.__setattr__(self, "items", items.astype(np.int64))
        object.__setattr__(self, "outcome", np.asarray(self.outcome).astype(np.int64))
        object.__setattr__(self, "covariates", cov)
        object.__setattr__(self, "weight", np.asarray(self.weight, dtype=float))
        object.__setattr__(self, "stratum", np.asarray(self.stratum))
        object.__setattr__(self, "cluster", np.asarray(self.cluster))
        object.__setattr__(self, "item_levels", np.asarray(levels, dtype=np.int64))
        names = tuple(self.covariate_names) or tuple(f"v{p + 1}" for p in range(cov.shape[1]))
        object.__setattr__(self, "covariate_names", names)
        for arr in (self.items, self.outcome, self.covariates, self.weight, self.stratum, self.cluster):
            arr.flags.writeable = False

    @property
    def n(self):
        return self.items.shape[0]

    @property
    def n_items(self):
        return self.items.shape[1]

    @property
    def n_covariates(self):
        return self.covariates.shape[1]

    def item_index(self):
        """Items as 0-based level indices."""
        return self.items - 1

    def with_outcome(self, outcome):
        return SurveyDataset(self.items, outcome, self.covariates, self.weight, self.stratum,
                             self.cluster, self.item_levels, self.covariate_names)

    def with_weight(self, weight):
        return SurveyDataset(self.items, self.outcome, self.covariates, weight, self.stratum,
                             self.cluster, self.item_levels, self.covariate_names)

    def with_covariates(self, covariates, names=()):
        return SurveyDataset(self.items, self.outcome, covariates, self.weight, self.stratum,
                             self.cluster, self.item_levels, tuple(names))

    def subset(self, index):
        index = np.asarray(index)
        return SurveyDataset(self.items[index], self.outcome[index], self.covariates[index],
                             self.weight[index], self.stratum[index], self.cluster[index],
                             self.item_levels, self.covariate_names)


@dataclass(frozen=True)
class Violation:
    message: str
    row: int | None = None
    column: str | None = None

    def to_dict(self):
        return {"message": self.message, "row": self.row, "column": self.column}


@dataclass
class ValidationReport:
    violations: list = field(default_factory=list)

    def __bool__(self):
        # truthy when there is something to report
        return bool(self.violations)

    def __len__(self):
        return len(self.violations)

    def add(self, message, row=None, column=None):
        self.violations.append(Violation(message, row, column))

    def to_dict(self):
        return {"valid": not self.violations,
                "violations": [v.to_dict() for v in self.violations]}


def validate_dataset(ds: SurveyDataset, max_per_kind: int = 50) -> ValidationReport:
    """Collect every invariant violation of ``ds``; an empty report means valid.

    At most ``max_per_kind`` violations of one kind are listed individually.
    """
    report = ValidationReport()
    n, J = ds.items.shape
    if n < 1:
        report.add("dataset has no rows")
    if J < 1:
        report.add("dataset has no items")
    if len(ds.item_levels) != J:
        report.add(f"item_levels has length {len(ds.item_levels)}, expected {J}")
        return report
    for name, arr in (("y", ds.outcome), ("weight", ds.weight), ("stratum", ds.stratum),
                      ("cluster", ds.cluster)):
        if len(arr) != n:
            report.add(f"column has {len(arr)} entries, expected {n}", column=name)
    if ds.covariates.shape[0] != n:
        report.add(f"covariates have {ds.covariates.shape[0]} rows, expected {n}")
    if report:
        return report

    bad = np.argwhere((ds.items < 1) | (ds.items > ds.item_levels[None, :]))
    for row, col in bad[:max_per_kind]:
        report.add(f"item code {ds.items[row, col]} outside 1..{ds.item_levels[col]}",
                   row=int(row), column=f"item_{col + 1}")
    for row in np.flatnonzero(~np.isin(ds.outcome, (0, 1)))[:max_per_kind]:
        report.add(f"outcome {ds.outcome[row]} is not 0/1", row=int(row), column="y")
    for row in np.flatnonzero(~(np.isfinite(ds.weight) & (ds.weight > 0)))[:max_per_kind]:
        report.add(f"weight {ds.weight[row]} is not a positive finite number",
                   row=int(row), column="weight")
    if not np.all(np.isfinite(ds.covariates)):
        rows, cols = np.nonzero(~np.isfinite(ds.covariates))
        for row, col in list(zip(rows, cols))[:max_per_kind]:
            report.add("covariate is not finite", row=int(row), column=ds.covariate_names[col])

    frame = pd.DataFrame({"cluster": ds.cluster, "stratum": ds.stratum})
    spans = frame.groupby("cluster")["stratum"].nunique()
    for cl in spans[spans > 1].index[:max_per_kind]:
        strata = sorted(frame.loc[frame["cluster"] == cl, "stratum"].unique().tolist())
        report.add(f"cluster {cl} appears in strata {strata}", column="cluster")
    return report


def check_dataset(ds: SurveyDataset) -> SurveyDataset:
    report = validate_dataset(ds)
    if report:
        first = report.violations[0]
        raise ValidationError(f"invalid dataset ({len(report)} violations; first: {first.message})",
                              report)
    return ds


# ------------------------------------------------------------------ #
# CSV ingestion
# ------------------------------------------------------------------ #

DESIGN_COLUMNS = ("y", "weight", "stratum", "cluster")


def read_survey_csv(path, item_levels=None) -> tuple[SurveyDataset, ValidationReport]:
    """Parse a survey CSV into a dataset and its validation report.

    Expected header: ``item_1..item_J, y, weight, stratum, cluster`` followed by
    numeric covariate columns.  Structural problems (missing columns, missing
    values, non-numeric cells) are returned in the report with ``dataset=None``.
    """
    report = ValidationReport()
    try:
        frame = pd.read_csv(path)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        report.add(f"cannot read CSV: {exc}")
        return None, report

    item_cols = [c for c in frame.columns if c.startswith("item_")]
    expected = [f"item_{j + 1}" for j in range(len(item_cols))]
    if not item_cols:
        report.add("no item_<j> columns found")
    elif item_cols != expected:
        report.add(f"item columns must be item_1..item_{len(item_cols)} in order")
    for col in DESIGN_COLUMNS:
        if col not in frame.columns:
            report.add("required column missing", column=col)
    if report:
        return None, report

    cov_cols = [c for c in frame.columns if c not in item_cols and c not in DESIGN_COLUMNS]
    for col in frame.columns:
        missing = np.flatnonzero(frame[col].isna().to_numpy())
        for row in missing[:20]:
            report.add("missing value", row=int(row), column=col)
        if not pd.api.types.is_numeric_dtype(frame[col]):
            report.add("column is not numeric", column=col)
    if report:
        return None, report

    items = frame[item_cols].to_numpy()
    if not np.all(items == np.round(items)):
        report.add("item codes must be integers")
        return None, report
    if item_levels is None:
        item_levels = np.maximum(items.max(axis=0), 1).astype(np.int64)
    ds = SurveyDataset(
        items=items.astype(np.int64),
        outcome=frame["y"].to_numpy(),
        covariates=frame[cov_cols].to_numpy(dtype=float) if cov_cols else np.zeros((len(frame), 0)),
        weight=frame["weight"].to_numpy(dtype=float),
        stratum=frame["stratum"].to_numpy(),
        cluster=frame["cluster"].to_numpy(),
        item_levels=item_levels,
        covariate_names=tuple(cov_cols),
    )
    return ds, validate_dataset(ds)


def write_survey_csv(ds: SurveyDataset, path) -> None:
    cols = {f"item_{j + 1}": ds.items[:, j] for j in range(ds.n_items)}
    cols.update(y=ds.outcome, weight=ds.weight, stratum=ds.stratum, cluster=ds.cluster)
    for p, name in enumerate(ds.covariate_names):
        cols[name] = ds.covariates[:, p]
    pd.DataFrame(cols).to_csv(Path(path), index=False, float_format="%.17g")


# ------------------------------------------------------------------ #
# Weights
# ------------------------------------------------------------------ #


@dataclass(frozen=True)
class NormalizedWeights:
    kappa: float
    wtilde: np.ndarray


def normalize_weights(weight) -> NormalizedWeights:
    """Divide the weights by their mean so that they sum to the sample size."""
    w = np.asarray(weight, dtype=float)
    if w.ndim != 1 or w.size == 0:
        raise ValidationError("weight must be a non-empty vector")
    if not np.all(np.isfinite(w)) or np.any(w <= 0):
        raise ValidationError("weights must be positive and finite")
    kappa = float(w.sum() / w.size)
    return NormalizedWeights(kappa=kappa, wtilde=w / kappa)


# ------------------------------------------------------------------ #
# Parameters, priors, configuration
# ------------------------------------------------------------------ #


def _check_simplex(arr, axis, name, tol=1e-9):
    arr = np.asarray(arr, dtype=float)
    if np.any(arr < 0) or np.any(np.abs(arr.sum(axis=axis) - 1.0) > tol):
        raise ValidationError(f"{name} entries must be nonnegative and sum to 1")


@dataclass
class ModelParams:
    """Mixture weights ``pi`` (K,), item probabilities ``theta`` (J, K, R) and
    probit coefficients ``xi`` (K, q).  Levels beyond R_j are zero-padded."""

    pi: np.ndarray
    theta: np.ndarray
    xi: np.ndarray

    def __post_init__(self):
        self.pi = np.asarray(self.pi, dtype=float)
        self.theta = np.asarray(self.theta, dtype=float)
        self.xi = np.atleast_2d(np.asarray(self.xi, dtype=float))

    @property
    def n_classes(self):
        return self.pi.shape[0]

    def validate(self, tol=1e-9):
        _check_simplex(self.pi, 0, "pi", tol)
        _check_simplex(self.theta, 2, "theta", tol)
        K = self.n_classes
        if self.theta.shape[1] != K or self.xi.shape[0] != K:
            raise ValidationError("pi, theta and xi disagree on the number of classes")
        return self

    def copy(self):
        return ModelParams(self.pi.copy(), self.theta.copy(), self.xi.copy())


@dataclass(frozen=True)
class PriorSpec:
    alpha: np.ndarray
    eta: np.ndarray
    mu0: np.ndarray
    sigma0_diag: np.ndarray

    def __post_init__(self):
        for name in ("alpha", "eta", "sigma0_diag"):
            arr = np.atleast_1d(np.asarray(getattr(self, name), dtype=float))
            if np.any(arr <= 0) or not np.all(np.isfinite(arr)):
                raise ValidationError(f"{name} entries must be positive")
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "mu0", np.atleast_1d(np.asarray(self.mu0, dtype=float)))

    @classmethod
    def default(cls, n_classes, n_levels, q, alpha=None, mu0=0.0, sigma2=4.0):
        """Sparse Dirichlet ``alpha = 1/K``, flat ``eta``, N(mu0, sigma2 I) on each xi block."""
        alpha = np.full(n_classes, 1.0 / n_classes if alpha is None else alpha)
        return cls(alpha=alpha, eta=np.ones(n_levels), mu0=np.full(q, mu0),
                   sigma0_diag=np.full(q, sigma2))

    def with_classes(self, n_classes, alpha=None):
        a = np.full(n_classes, self.alpha[0] if alpha is None else alpha)
        return PriorSpec(a, self.eta, self.mu0, self.sigma0_diag)


@dataclass(frozen=True)
class McmcConfig:
    n_iter: int = 20000
    n_burn: int = 10000
    thin: int = 5
    seed: int = 0
    k_max: int = 30
    class_cutoff: float = 0.05
    adjust_variance: bool = True
    n_boot_reps: int = 100
    fd_step: float = 1e-5
    ridge: float = 1e-8
    fixed_alpha: float = 1.0

    def __post_init__(self):
        if self.n_burn >= self.n_iter:
            raise ValidationError("n_burn must be smaller than n_iter")
        if self.n_burn < 0 or self.thin < 1:
            raise ValidationError("n_burn must be >= 0 and thin >= 1")
        if self.k_max < 2:
            raise ValidationError("k_max must be at least 2")

    @property
    def n_kept(self):
        return len(range(self.n_burn, self.n_iter, self.thin))


# ------------------------------------------------------------------ #
# Mixture reference coding
# ------------------------------------------------------------------ #


@dataclass(frozen=True)
class CodingSpec:
    """Every class owns an intercept plus one slope per covariate column."""

    n_classes: int
    n_covariates: int

    @property
    def block_size(self):
        return 1 + self.n_covariates

    @property
    def n_columns(self):
        return self.n_classes * self.block_size


def build_design_row(klass: int, covariates, coding: CodingSpec) -> np.ndarray:
    """Full mixture-reference-coded regression row for one individual.

    Block ``klass`` holds ``(1, v)``; every other block is zero.
    """
    v = np.atleast_1d(np.asarray(covariates, dtype=float))
    if v.shape != (coding.n_covariates,):
        raise ValidationError(f"expected {coding.n_covariates} covariates, got {v.shape}")
    if not 0 <= klass < coding.n_classes:
        raise ValidationError(f"class {klass} outside 0..{coding.n_classes - 1}")
    row = np.zeros(coding.n_columns)
    b = coding.block_size
    row[klass * b] = 1.0
    row[klass * b + 1:(klass + 1) * b] = v
    return row


def class_design(covariates) -> np.ndarray:
    """Per-class block ``(1, v_i)`` for every individual, shape (n, 1 + p)."""
    cov = np.asarray(covariates, dtype=float)
    if cov.ndim == 1:
        cov = cov[:, None]
    return np.column_stack([np.ones(cov.shape[0]), cov])
