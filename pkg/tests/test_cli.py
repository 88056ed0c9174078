import json
import shutil
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
import pandas as pd
import pytest

from swolca.cli import InputError, chain_columns, main, parse_profile, read_chain_csv

FAST = ["--iters", "600", "--burn", "300", "--thin", "3", "--kmax", "8", "--boot", "20", "--seed", "5"]


def schema(name):
    return json.loads(resources.files("swolca").joinpath("schemas", f"{name}.schema.json").read_text())


@pytest.fixture(scope="module")
def toy_csv(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "toy.csv"
    with resources.as_file(resources.files("swolca").joinpath("data", "toy_survey.csv")) as src:
        shutil.copy(src, path)
    return path


@pytest.fixture(scope="module")
def fit_dir(toy_csv, tmp_path_factory):
    out = tmp_path_factory.mktemp("fit")
    code = main(["fit", "--input", str(toy_csv), "--out", str(out), "--plot",
                 "--profile", "class=1,stratum2=1", *FAST])
    assert code == 0
    return out


def test_fit_outputs(fit_dir, capsys):
    for name in ("chain.csv", "fit_meta.json", "diagnostics.json", "summary.json", "patterns.svg"):
        assert (fit_dir / name).exists(), name
    summary = json.loads((fit_dir / "summary.json").read_text())
    assert summary["k_hat"] == 2 and summary["model"] == "swolca"
    assert len(summary["pi"]["median"]) == 2
    profiled = [r for r in summary["outcome_probabilities"] if r["profile"]]
    assert len(profiled) == 1 and profiled[0]["class"] == 1


def test_outputs_match_schemas(fit_dir):
    for name in ("summary", "diagnostics", "fit_meta"):
        jsonschema.validate(json.loads((fit_dir / f"{name}.json").read_text()), schema(name))


def test_chain_csv_header(fit_dir):
    meta = json.loads((fit_dir / "fit_meta.json").read_text())
    frame = pd.read_csv(fit_dir / "chain.csv")
    assert list(frame.columns) == chain_columns(meta["k_hat"], meta["item_levels"], meta["q_chain"])
    assert frame.columns[0] == "pi_1"


def test_fit_is_deterministic(fit_dir, toy_csv, tmp_path):
    code = main(["fit", "--input", str(toy_csv), "--out", str(tmp_path), "--plot",
                 "--profile", "class=1,stratum2=1", *FAST])
    assert code == 0
    for name in ("chain.csv", "summary.json", "patterns.svg"):
        assert (tmp_path / name).read_bytes() == (fit_dir / name).read_bytes(), name


def test_summarize_reproduces_summary(fit_dir, tmp_path):
    for name in ("chain.csv", "fit_meta.json"):
        shutil.copy(fit_dir / name, tmp_path / name)
    assert main(["summarize", "--out", str(tmp_path), "--plot"]) == 0
    assert (tmp_path / "summary.json").read_bytes() == (fit_dir / "summary.json").read_bytes()
    assert (tmp_path / "patterns.svg").read_bytes() == (fit_dir / "patterns.svg").read_bytes()


def test_truncated_chain_is_rejected(fit_dir, tmp_path, capsys):
    for name in ("chain.csv", "fit_meta.json"):
        shutil.copy(fit_dir / name, tmp_path / name)
    lines = (tmp_path / "chain.csv").read_text().splitlines()
    lines[-1] = lines[-1][: len(lines[-1]) // 2]
    (tmp_path / "chain.csv").write_text("\n".join(lines) + "\n")
    assert main(["summarize", "--out", str(tmp_path)]) == 2
    (tmp_path / "chain.csv").write_text("pi_1,bogus\n0.5,0.5\n")
    assert main(["summarize", "--out", str(tmp_path)]) == 2


def test_invalid_input_writes_report(toy_csv, tmp_path, capsys):
    frame = pd.read_csv(toy_csv)
    frame.loc[3, "y"] = 2
    frame.loc[5, "weight"] = -1.0
    bad = tmp_path / "bad.csv"
    frame.to_csv(bad, index=False)
    out = tmp_path / "out"
    assert main(["fit", "--input", str(bad), "--out", str(out), *FAST]) == 2
    report = json.loads((out / "validation_report.json").read_text())
    jsonschema.validate(report, schema("validation_report"))
    assert not report["valid"]
    rows = {v.get("row") for v in report["violations"]}
    assert {3, 5} <= rows
    assert not (out / "chain.csv").exists()
    assert '"violations"' in capsys.readouterr().err


def test_missing_column_exits_2(toy_csv, tmp_path):
    frame = pd.read_csv(toy_csv).drop(columns="weight")
    bad = tmp_path / "bad.csv"
    frame.to_csv(bad, index=False)
    assert main(["fit", "--input", str(bad), "--out", str(tmp_path / "o"), *FAST]) == 2


def test_bad_profile_exits_2(toy_csv, tmp_path):
    code = main(["fit", "--input", str(toy_csv), "--out", str(tmp_path), "--profile", "age=3", *FAST])
    assert code == 2
    assert not (tmp_path / "chain.csv").exists()


def test_parse_profile():
    classes, cov, named = parse_profile("class=2,stratum2=1", ["stratum2"], 3)
    assert classes == [1] and list(cov) == [1.0] and named == {"stratum2": 1.0}
    classes, cov, _ = parse_profile("", ["a", "b"], 2)
    assert classes == [0, 1] and list(cov) == [0.0, 0.0]
    for text in ("class=4", "a=x", "a"):
        with pytest.raises(InputError):
            parse_profile(text, ["a"], 3)


def test_read_chain_csv_rejects_nan(tmp_path):
    cols = chain_columns(1, [2], 1)
    pd.DataFrame([[1.0, 0.5, np.nan, 0.1]], columns=cols).to_csv(tmp_path / "c.csv", index=False)
    with pytest.raises(InputError):
        read_chain_csv(tmp_path / "c.csv", 1, [2], 1)


def test_config_file_and_flag_precedence(toy_csv, tmp_path):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text("iters: 600\nburn: 300\nthin: 3\nkmax: 8\nboot: 20\nseed: 99\nadjust: false\n")
    out = tmp_path / "o"
    assert main(["fit", "--input", str(toy_csv), "--out", str(out), "--config", str(cfg), "--seed", "5"]) == 0
    meta = json.loads((out / "fit_meta.json").read_text())
    assert meta["config"]["seed"] == 5
    assert meta["config"]["n_iter"] == 600 and meta["config"]["k_max"] == 8
    assert meta["adjusted"] is False
    cfg.write_text("iterations: 10\n")
    assert main(["fit", "--input", str(toy_csv), "--out", str(out), "--config", str(cfg)]) == 2


def test_wolca_fit(toy_csv, tmp_path):
    assert main(["fit", "--input", str(toy_csv), "--out", str(tmp_path), "--model", "wolca", *FAST]) == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    jsonschema.validate(summary, schema("summary"))
    assert summary["xi"]["interval"] == "wald"
    # summarize rebuilds the Wald intervals from the stored step-2 fit
    before = (tmp_path / "summary.json").read_bytes()
    assert main(["summarize", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "summary.json").read_bytes() == before


def test_simulate_smoke(tmp_path, capsys):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text("n: 400\niters: 300\nburn: 150\nthin: 3\nkmax: 6\nboot: 10\n")
    out = tmp_path / "sim"
    code = main(["simulate", "--scenario", "1", "--replicates", "1", "--models", "solca,wolca",
                 "--config", str(cfg), "--out", str(out)])
    assert code == 0
    metrics = json.loads((out / "metrics.json").read_text())
    jsonschema.validate(metrics, schema("metrics"))
    assert set(metrics["models"]) == {"SOLCA", "WOLCA"}
    assert (out / "replicates.csv").exists()
    assert "| 1 | SOLCA |" in (out / "metrics.md").read_text()


def test_simulate_rejects_unknown_model(tmp_path):
    assert main(["simulate", "--models", "lca", "--out", str(tmp_path)]) == 2
    assert main(["simulate", "--scenario", "42", "--out", str(tmp_path)]) == 2
