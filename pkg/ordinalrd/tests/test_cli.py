import pathlib
import textwrap

import click.testing
import pandas as pd
import pytest

from ordinalrd.cli import main
from ordinalrd.simlab import OutcomeFunction, generate
from ordinalrd.tests.conftest import reference_config, write_study

MANIFEST = """
data:
  path: study.csv
  outcome: spread
  category: rating
  id: id
scale:
  labels: [r1, r2, r3, r4]
  threshold: r3
covariates: [x1, x2]
outcome:
  terms: [x1, x2]
search:
  critical: {critical}
inference:
  significance: {significance}
seed: 1
"""

SIMULATION = """
mode: monte-carlo
estimand: ATO
replications: {replications}
interval: [0.1, 0.9]
seed: 2
dgp:
  n: 400
  beta: [1.0, -0.5]
  cutoffs: [-1.0, 0.0, 1.0]
  threshold: 3
  mu0: {{terms: [x1, x2], coefficients: [1.0, 2.0, -1.0]}}
  mu1: {{terms: [x1, x2], coefficients: [3.0, 2.5, -1.0]}}
"""

OUTPUTS = [
    "probit.txt",
    "propensity_by_category.tsv",
    "balance_symmetric.tsv",
    "balance_asymmetric.tsv",
    "estimates.tsv",
    "influence.tsv",
    "report.txt",
    "summary.tsv",
    "outcome_by_category.tsv",
    "drops.tsv",
]


def read_tsv(path: pathlib.Path) -> pd.DataFrame:
    return pd.read_csv(path, sep="\t", comment="#")


def invoke(*args: str) -> click.testing.Result:
    return click.testing.CliRunner().invoke(main, [str(arg) for arg in args], catch_exceptions=False)


@pytest.fixture()
def study(tmp_path) -> pathlib.Path:
    write_study(generate(reference_config(n=1500, seed=31)), tmp_path / "study.csv")
    return write_manifest(tmp_path)


def write_manifest(tmp_path: pathlib.Path, critical: float = 10, significance: float = 0.10) -> pathlib.Path:
    path = tmp_path / "manifest.yaml"
    path.write_text(textwrap.dedent(MANIFEST.format(critical=critical, significance=significance)), encoding="utf-8")
    return path


def test_validate(study):
    result = invoke("--manifest", study, "validate")
    assert result.exit_code == 0

    output = study.parent / "output"
    summary = read_tsv(output / "summary.tsv")
    assert summary["covariate"].tolist() == ["x1", "x2"]
    outcomes = read_tsv(output / "outcome_by_category.tsv")
    assert outcomes["category"].tolist() == ["r1", "r2", "r3", "r4"]
    assert outcomes["n"].sum() == 1500
    assert (output / "drops.tsv").read_text().startswith("# manifest_sha256=")
    assert read_tsv(output / "drops.tsv").empty


def test_run_writes_every_artifact(study, tmp_path):
    result = invoke("--manifest", study, "--out", tmp_path / "first", "run")
    assert result.exit_code == 0

    for name in OUTPUTS:
        assert (tmp_path / "first" / name).exists(), name

    estimates = read_tsv(tmp_path / "first" / "estimates.tsv")
    assert estimates["estimand"].tolist() == ["ATO", "ATT"]
    assert list(estimates.columns) == [
        "estimand",
        "e_min",
        "e_max",
        "n0",
        "n1",
        "estimate",
        "se",
        "p_value",
        "level",
        "ci_lower",
        "ci_upper",
        "hajek",
    ]
    assert (estimates["level"] == 0.95).all()
    assert ((estimates["ci_lower"] < estimates["estimate"]) & (estimates["estimate"] < estimates["ci_upper"])).all()
    assert (estimates["se"] > 0).all()
    assert (estimates["e_min"] < 0.5).all() and (estimates["e_max"] > 0.5).all()

    symmetric = read_tsv(tmp_path / "first" / "balance_symmetric.tsv")
    assert set(symmetric["scheme"]) == {"ATO", "ATT", "NONE"}


def test_runs_are_reproducible(study, tmp_path):
    assert invoke("--manifest", study, "--out", tmp_path / "a", "run").exit_code == 0
    assert invoke("--manifest", study, "--out", tmp_path / "b", "run").exit_code == 0
    for name in OUTPUTS:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_seed_override_is_recorded(study, tmp_path):
    assert invoke("--manifest", study, "--out", tmp_path / "seeded", "--seed", 5, "validate").exit_code == 0
    assert "seed=5" in (tmp_path / "seeded" / "summary.tsv").read_text().splitlines()[0]


def test_manifest_errors_exit_with_2(study, tmp_path):
    study.write_text(study.read_text() + "colour: blue\n", encoding="utf-8")
    assert invoke("--manifest", study, "validate").exit_code == 2
    assert invoke("--manifest", tmp_path / "absent.yaml", "run").exit_code == 2


def test_malformed_numbers_exit_with_2(tmp_path):
    manifest = write_manifest(tmp_path, critical="wide")  # type: ignore[arg-type]
    result = invoke("--manifest", manifest, "validate")
    assert result.exit_code == 2
    assert "search.critical" in result.output


def replace_rating(data: pathlib.Path, line: int, rating: str) -> None:
    lines = data.read_text().splitlines()
    fields = lines[line].split(",")
    fields[2] = rating
    lines[line] = ",".join(fields)
    data.write_text("\n".join(lines) + "\n", encoding="utf-8")


def test_unknown_category_exits_with_3(study):
    replace_rating(study.parent / "study.csv", 5, "AAA")

    assert invoke("--manifest", study, "run").exit_code == 3
    errors = read_tsv(study.parent / "output" / "errors.tsv")
    assert errors["stage"].tolist() == ["data"]
    assert errors["exit_code"].tolist() == [3]


def test_missing_category_is_dropped_unless_strict(study, tmp_path):
    replace_rating(study.parent / "study.csv", 5, "")

    assert invoke("--manifest", study, "--out", tmp_path / "lenient", "validate").exit_code == 0
    drops = read_tsv(tmp_path / "lenient" / "drops.tsv")
    assert drops["reason"].tolist() == ["missing-rating"]

    assert invoke("--manifest", study, "--out", tmp_path / "strict", "--strict", "validate").exit_code == 3


def test_no_balanced_interval_exits_with_5(study):
    manifest = write_manifest(study.parent, critical=0.001)
    assert invoke("--manifest", manifest, "run").exit_code == 5

    output = study.parent / "output"
    assert (output / "balance_symmetric.tsv").exists()
    assert not (output / "estimates.tsv").exists()
    assert read_tsv(output / "errors.tsv")["stage"].tolist() == ["balance"]


def null_control(tmp_path: pathlib.Path, shift: float = 0.0) -> pathlib.Path:
    no_effect = OutcomeFunction(terms=("x1", "x2"), coefficients=(1.0, 2.0, -1.0))
    sample = generate(reference_config(n=1500, seed=32, mu1=no_effect))
    return write_study(sample, tmp_path / "control.csv", shift=shift)


def test_falsification_passes_on_a_null_control(study, tmp_path):
    manifest = write_manifest(tmp_path, significance=1e-12)
    result = invoke("--manifest", manifest, "falsify", "--control", null_control(tmp_path))
    assert result.exit_code == 0
    assert "PASS" in result.output

    output = tmp_path / "output" / "falsification"
    assert list(read_tsv(output / "estimates.tsv").columns)[:3] == ["estimand", "e_min", "e_max"]
    assert "PASS at the 1e-12 significance level" in (output / "report.txt").read_text()


def test_falsification_fails_on_a_shifted_control(study, tmp_path):
    result = invoke("--manifest", study, "falsify", "--control", null_control(tmp_path, shift=50.0))
    assert result.exit_code == 0
    assert "FAIL" in result.output
    assert "FAIL at the 0.1 significance level" in (tmp_path / "output" / "falsification" / "report.txt").read_text()


def test_simulate(tmp_path):
    manifest = tmp_path / "simulation.yaml"
    manifest.write_text(textwrap.dedent(SIMULATION.format(replications=10)), encoding="utf-8")
    assert invoke("--manifest", manifest, "simulate").exit_code == 0

    records = read_tsv(tmp_path / "output" / "mc_records.tsv")
    assert len(records) == 10
    assert (records["error"].isna() | (records["error"] == "")).all()
    summary = read_tsv(tmp_path / "output" / "mc_summary.tsv")
    assert summary["replications"].tolist() == [10]


def test_simulate_rejects_too_few_replications(tmp_path):
    manifest = tmp_path / "simulation.yaml"
    manifest.write_text(textwrap.dedent(SIMULATION.format(replications=0)), encoding="utf-8")
    assert invoke("--manifest", manifest, "simulate").exit_code == 2
