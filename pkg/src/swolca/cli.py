"""Command-line front end: ``swolca fit | simulate | summarize``.

Exit codes: 0 success, 2 input or validation problem, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import pandas as pd
import yaml
from scipy import stats
from scipy.special import ndtr

from .core import McmcConfig, NumericalError, ValidationError, ValidationReport, read_survey_csv
from .estimators import SOLCA, SWOLCA, WOLCA
from .gibbs import ChainOutput
from .postprocess import outcome_probability, summarize
from .simgen import BLOCKS, ScenarioSpec, get_scenario, run_scenario

log = logging.getLogger("swolca")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3
ESTIMATORS = {"swolca": SWOLCA, "solca": SOLCA, "wolca": WOLCA}

# flag name -> (config key, default)
DEFAULTS = {
    "model": "swolca",
    "iters": 20000,
    "burn": 10000,
    "thin": 5,
    "seed": 0,
    "kmax": 30,
    "cutoff": 0.05,
    "adjust": True,
    "boot": 100,
    "scenario": 2,
    "replicates": 20,
    "models": "solca,wolca,swolca",
    "plot": False,
    "profile": None,
    "n_jobs": None,
}


class InputError(Exception):
    """Problem with user input that maps to exit code 2."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


# ------------------------------------------------------------------ #
# Configuration
# ------------------------------------------------------------------ #


def load_config_file(path):
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise InputError(f"cannot read config file {path}: {exc}") from None
    if not isinstance(data, dict):
        raise InputError("config file must contain a mapping")
    return {str(k).replace("-", "_"): v for k, v in data.items()}


def resolve_options(args) -> dict:
    """Defaults, then the config file, then explicitly given flags."""
    opts = dict(DEFAULTS)
    if getattr(args, "config", None):
        file_opts = load_config_file(args.config)
        unknown = set(file_opts) - set(DEFAULTS) - {"input", "out", "design", "association", "n", "pattern"}
        if unknown:
            raise InputError(f"unknown config keys: {sorted(unknown)}")
        opts.update(file_opts)
    for key, value in vars(args).items():
        if value is not None and key not in ("command", "config", "func", "verbose"):
            opts[key] = value
    return opts


def mcmc_config(opts) -> McmcConfig:
    try:
        return McmcConfig(n_iter=int(opts["iters"]), n_burn=int(opts["burn"]), thin=int(opts["thin"]),
                          seed=int(opts["seed"]), k_max=int(opts["kmax"]), class_cutoff=float(opts["cutoff"]),
                          adjust_variance=bool(opts["adjust"]), n_boot_reps=int(opts["boot"]))
    except ValidationError as exc:
        raise InputError(str(exc)) from None


def parse_profile(text, covariate_names, n_classes):
    """``"class=1,stratum2=1"`` -> (class list 0-based, covariate vector, dict)."""
    values = {}
    for part in filter(None, (p.strip() for p in text.split(","))):
        if "=" not in part:
            raise InputError(f"profile entry {part!r} is not key=value")
        key, val = (s.strip() for s in part.split("=", 1))
        try:
            values[key] = float(val)
        except ValueError:
            raise InputError(f"profile value {val!r} is not numeric") from None
    unknown = set(values) - set(covariate_names) - {"class"}
    if unknown:
        raise InputError(f"profile names unknown covariates {sorted(unknown)}; known: {list(covariate_names)}")
    if "class" in values:
        k = int(values["class"])
        if not 1 <= k <= n_classes:
            raise InputError(f"profile class {k} outside 1..{n_classes}")
        classes = [k - 1]
    else:
        classes = list(range(n_classes))
    cov = np.array([values.get(name, 0.0) for name in covariate_names])
    return classes, cov, {name: values.get(name, 0.0) for name in covariate_names}


# ------------------------------------------------------------------ #
# Chain CSV
# ------------------------------------------------------------------ #


def chain_columns(K, levels, q):
    cols = [f"pi_{k + 1}" for k in range(K)]
    for j, Rj in enumerate(levels):
        for k in range(K):
            cols += [f"theta_{j + 1}_{k + 1}_{r + 1}" for r in range(int(Rj))]
    cols += [f"xi_{k + 1}_{c + 1}" for k in range(K) for c in range(q)]
    return cols


def chain_to_frame(chain: ChainOutput, levels) -> pd.DataFrame:
    M, K = chain.pi.shape
    q = chain.xi.shape[2]
    blocks = [chain.pi]
    for j, Rj in enumerate(levels):
        blocks.append(chain.theta[:, j, :, :int(Rj)].reshape(M, -1))
    blocks.append(chain.xi.reshape(M, -1))
    return pd.DataFrame(np.hstack(blocks), columns=chain_columns(K, levels, q))


def write_chain_csv(chain, levels, path):
    chain_to_frame(chain, levels).to_csv(path, index=False, float_format="%.17g")


def read_chain_csv(path, K, levels, q) -> ChainOutput:
    """Parse ``chain.csv``; any structural problem raises :class:`InputError`."""
    try:
        frame = pd.read_csv(path, dtype=float)
    except FileNotFoundError:
        raise InputError(f"chain file {path} not found") from None
    except (ValueError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise InputError(f"cannot parse chain file {path}: {exc}") from None
    expected = chain_columns(K, levels, q)
    if list(frame.columns) != expected:
        raise InputError(f"chain file {path} header does not match the fit metadata")
    values = frame.to_numpy()
    if values.shape[0] == 0:
        raise InputError(f"chain file {path} has no draws")
    if not np.all(np.isfinite(values)):
        bad = int(np.flatnonzero(~np.isfinite(values).all(axis=1))[0])
        raise InputError(f"chain file {path} is truncated or corrupt at draw {bad + 1}")
    M = values.shape[0]
    R = int(max(levels))
    J = len(levels)
    pi = values[:, :K]
    theta = np.zeros((M, J, K, R))
    pos = K
    for j, Rj in enumerate(levels):
        width = K * int(Rj)
        theta[:, j, :, :int(Rj)] = values[:, pos:pos + width].reshape(M, K, int(Rj))
        pos += width
    xi = values[:, pos:pos + K * q].reshape(M, K, q)
    return ChainOutput(pi, theta, xi, np.zeros((M, 0), dtype=np.int16), K)


# ------------------------------------------------------------------ #
# Summaries
# ------------------------------------------------------------------ #


def _tolist(a):
    return np.asarray(a, dtype=float).tolist()


def _theta_lists(arr, levels):
    return [[_tolist(arr[j, k, :int(Rj)]) for k in range(arr.shape[1])] for j, Rj in enumerate(levels)]


def build_summary(chain: ChainOutput, meta: dict) -> dict:
    """JSON-ready summary of a stored chain plus the fit metadata."""
    levels = meta["item_levels"]
    names = meta["covariate_names"]
    K = meta["k_hat"]
    s = summarize(chain)
    out = {
        "model": meta["model"],
        "k_hat": K,
        "n": meta["n"],
        "n_draws": int(chain.pi.shape[0]),
        "adjusted": bool(meta.get("adjusted", False)),
        "pi": {key: _tolist(s["pi"][key]) for key in ("median", "median_raw", "lower", "upper")},
        "theta": {key: _theta_lists(s["theta"][key], levels) for key in ("median", "lower", "upper")},
    }
    xi_names = ["intercept"] + list(names)
    if meta["model"] == "wolca":
        step2 = meta["step2"]
        coef = np.asarray(step2["coef"]).reshape(K, -1)
        cov = np.asarray(step2["cov"])
        se = np.sqrt(np.clip(np.diag(cov), 0, None)).reshape(K, -1)
        tq = stats.t.ppf(0.975, step2["df"])
        out["xi"] = {"names": xi_names, "interval": "wald", "median": _tolist(coef),
                     "lower": _tolist(coef - tq * se), "upper": _tolist(coef + tq * se),
                     "prob_positive": None, "df": int(step2["df"])}
    else:
        out["xi"] = {"names": xi_names, "interval": "credible",
                     **{key: _tolist(s["xi"][key]) for key in ("median", "lower", "upper", "prob_positive")}}

    probs = []
    for text in meta.get("profiles") or [""]:
        classes, v, named = parse_profile(text, names, K)
        for k in classes:
            if meta["model"] == "wolca":
                res = _wald_probability(meta["step2"], K, k, v)
            else:
                res = outcome_probability(chain, k, v)
            probs.append({"profile": text, "class": k + 1, "covariates": named,
                          **{key: float(res[key]) for key in ("median", "lower", "upper")}})
    out["outcome_probabilities"] = probs
    return out


def _wald_probability(step2, K, k, v):
    coef = np.asarray(step2["coef"])
    cov = np.asarray(step2["cov"])
    x = np.concatenate([[1.0], v])
    q = x.size
    sl = slice(k * q, (k + 1) * q)
    est = float(x @ coef[sl])
    se = float(np.sqrt(max(x @ cov[sl, sl] @ x, 0.0)))
    tq = stats.t.ppf(0.975, step2["df"])
    return {"median": ndtr(est), "lower": ndtr(est - tq * se), "upper": ndtr(est + tq * se)}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def write_json(obj, path):
    with open(path, "w") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=False)
        fh.write("\n")


def _write_summary_and_plots(out_dir: Path, meta: dict, plot: bool):
    chain = read_chain_csv(out_dir / "chain.csv", meta["k_hat"], meta["item_levels"], meta["q_chain"])
    summary = build_summary(chain, meta)
    write_json(summary, out_dir / "summary.json")
    if plot:
        from .plotting import plot_patterns, plot_probabilities

        med = summarize(chain)["theta"]["median"]
        plot_patterns(med, meta["item_levels"], out_dir / "patterns.svg")
        plot_probabilities(med, meta["item_levels"], out_dir / "probabilities.svg")
    return summary


# ------------------------------------------------------------------ #
# Commands
# ------------------------------------------------------------------ #


def _out_dir(opts):
    if not opts.get("out"):
        raise InputError("--out is required")
    out = Path(opts["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InputError(f"cannot create output directory {out}: {exc}") from None
    return out


def cmd_fit(opts) -> int:
    out = _out_dir(opts)
    if not opts.get("input"):
        raise InputError("--input is required")
    ds, report = read_survey_csv(opts["input"])
    if report:
        write_json(report.to_dict(), out / "validation_report.json")
        raise InputError(f"{opts['input']} failed validation ({len(report)} problems)", report)
    model = str(opts["model"]).lower()
    if model not in ESTIMATORS:
        raise InputError(f"unknown model {model!r}; choose from {sorted(ESTIMATORS)}")
    config = mcmc_config(opts)
    profiles = opts.get("profile") or []
    if isinstance(profiles, str):
        profiles = [profiles]
    for text in profiles:  # fail before the expensive fit
        parse_profile(text, ds.covariate_names, config.k_max)

    kw = dict(n_iter=config.n_iter, n_burn=config.n_burn, thin=config.thin, k_max=config.k_max,
              class_cutoff=config.class_cutoff, n_boot_reps=config.n_boot_reps, random_state=config.seed)
    if model == "swolca":
        kw["adjust_variance"] = config.adjust_variance
    est = ESTIMATORS[model](**kw).fit_dataset(ds)

    levels = [int(r) for r in ds.item_levels]
    meta = {
        "model": model,
        "k_hat": est.k_hat_,
        "n": ds.n,
        "item_levels": levels,
        "covariate_names": list(ds.covariate_names),
        "q_chain": int(est.chain_.xi.shape[2]),
        "adjusted": bool(est.adjusted_),
        "profiles": list(profiles),
        "config": asdict(config),
    }
    if model == "wolca":
        s2 = est.fit_.step2
        meta["step2"] = {"coef": s2.coef.tolist(), "cov": s2.cov.tolist(), "df": int(s2.df)}
    for text in profiles:
        parse_profile(text, ds.covariate_names, est.k_hat_)
    write_chain_csv(est.chain_, levels, out / "chain.csv")
    write_json(meta, out / "fit_meta.json")
    diagnostics = {"model": model, "k_hat": est.k_hat_, "adjustment": est.diagnostics_,
                   "adaptive_nonempty_median": (float(np.median(est.adaptive_nonempty_))
                                                if getattr(est, "adaptive_nonempty_", None) else None)}
    write_json(diagnostics, out / "diagnostics.json")
    summary = _write_summary_and_plots(out, meta, bool(opts.get("plot")))
    _print_probabilities(summary)
    return EXIT_OK


def _print_probabilities(summary):
    for row in summary["outcome_probabilities"]:
        label = row["profile"] or "baseline"
        print(f"class {row['class']} [{label}]: P(y=1) = {row['median']:.3f} "
              f"(95% interval {row['lower']:.3f}, {row['upper']:.3f})")


def cmd_summarize(opts) -> int:
    out = Path(opts.get("out") or ".")
    meta_path = out / "fit_meta.json"
    try:
        meta = json.loads(meta_path.read_text())
    except FileNotFoundError:
        raise InputError(f"{meta_path} not found; run fit first") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"cannot parse {meta_path}: {exc}") from None
    profiles = opts.get("profile")
    if profiles:
        meta["profiles"] = [profiles] if isinstance(profiles, str) else list(profiles)
    summary = _write_summary_and_plots(out, meta, bool(opts.get("plot")))
    _print_probabilities(summary)
    return EXIT_OK


def scenario_from_options(opts) -> ScenarioSpec:
    overrides = {k: opts[k] for k in ("design", "association", "n", "pattern") if k in opts}
    overrides["replicates"] = int(opts["replicates"])
    overrides["seed"] = int(opts["seed"])
    try:
        return get_scenario(opts["scenario"], **overrides)
    except (ValidationError, TypeError) as exc:
        raise InputError(str(exc)) from None


def markdown_table(result) -> str:
    head = ("| Scenario | Model | Bias K | Bias pi | Bias theta | Bias xi | Width pi | Width theta | "
            "Width xi | Cov pi | Cov theta | Cov xi |")
    lines = [head, "|" + "---|" * 12]
    for name, m in result.metrics.models.items():
        cells = [f"{m['K']['bias']:.2f}"]
        cells += [f"{m[b]['bias']:.3f}" for b in BLOCKS]
        cells += [f"{m[b]['width']:.3f}" for b in BLOCKS]
        cells += [f"{m[b]['coverage']:.3f}" for b in BLOCKS]
        lines.append(f"| {result.spec.id} | {name} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def cmd_simulate(opts) -> int:
    out = _out_dir(opts)
    spec = scenario_from_options(opts)
    config = mcmc_config(opts)
    models = [m.strip().upper() for m in str(opts["models"]).split(",") if m.strip()]
    bad = [m for m in models if m not in ("SOLCA", "WOLCA", "SWOLCA")]
    if bad or not models:
        raise InputError(f"unknown models {bad}; choose from solca, wolca, swolca")
    n_jobs = None if opts.get("n_jobs") is None else int(opts["n_jobs"])
    result = run_scenario(spec, models, config, n_jobs=n_jobs)
    metrics = {"scenario": asdict(spec), "config": asdict(config), **result.metrics.to_dict(),
               "failures": [{"model": m, "replicate": r, "error": e} for m, r, e in result.failures]}
    write_json(metrics, out / "metrics.json")
    result.replicates.to_csv(out / "replicates.csv", index=False, float_format="%.17g")
    table = markdown_table(result)
    (out / "metrics.md").write_text(table)
    print(table, end="")
    return EXIT_OK


# ------------------------------------------------------------------ #
# Parser
# ------------------------------------------------------------------ #


def _add_mcmc_flags(p):
    p.add_argument("--iters", type=int, help="total iterations per stage (default 20000)")
    p.add_argument("--burn", type=int, help="burn-in iterations (default 10000)")
    p.add_argument("--thin", type=int, help="keep every n-th draw (default 5)")
    p.add_argument("--seed", type=int, help="random seed (default 0)")
    p.add_argument("--kmax", type=int, help="classes in the overfitted stage (default 30)")
    p.add_argument("--cutoff", type=float, help="minimum share for a class to count (default 0.05)")
    p.add_argument("--boot", type=int, help="bootstrap replicates for the variance adjustment (default 100)")
    p.add_argument("--adjust", action=argparse.BooleanOptionalAction, default=None,
                   help="apply the sandwich variance adjustment (default on)")
    p.add_argument("--config", help="YAML/JSON file with option values; explicit flags take precedence")


def build_parser():
    parser = argparse.ArgumentParser(prog="swolca", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="fit a model to a survey CSV")
    fit.add_argument("--input", help="CSV with item_1..item_J, y, weight, stratum, cluster, covariates")
    fit.add_argument("--out", help="output directory")
    fit.add_argument("--model", choices=sorted(ESTIMATORS), help="estimator (default swolca)")
    fit.add_argument("--plot", action="store_true", default=None, help="write patterns.svg")
    fit.add_argument("--profile", action="append",
                     help='covariate profile such as "class=1,stratum2=1" (repeatable)')
    _add_mcmc_flags(fit)
    fit.set_defaults(func=cmd_fit)

    sim = sub.add_parser("simulate", help="run a simulation scenario")
    sim.add_argument("--scenario", type=int, help="scenario id 1-9 (default 2)")
    sim.add_argument("--replicates", type=int, help="number of replicate samples (default 20)")
    sim.add_argument("--models", help="comma-separated subset of solca,wolca,swolca")
    sim.add_argument("--out", help="output directory")
    sim.add_argument("--n-jobs", dest="n_jobs", type=int, help="parallel replicates (default $SWOLCA_N_JOBS or 1)")
    _add_mcmc_flags(sim)
    sim.set_defaults(func=cmd_simulate)

    summ = sub.add_parser("summarize", help="recompute summaries from a stored chain")
    summ.add_argument("--out", help="directory holding chain.csv and fit_meta.json")
    summ.add_argument("--plot", action="store_true", default=None, help="regenerate patterns.svg")
    summ.add_argument("--profile", action="append", help="covariate profile (repeatable)")
    summ.set_defaults(func=cmd_summarize)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        opts = resolve_options(args)
        return args.func(opts)
    except (InputError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        report = getattr(exc, "report", None)
        if isinstance(report, ValidationReport):
            json.dump(report.to_dict(), sys.stderr, indent=2)
            sys.stderr.write("\n")
        return EXIT_INPUT
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
