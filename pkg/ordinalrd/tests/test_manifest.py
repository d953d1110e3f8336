import hashlib
import pathlib
import textwrap

import pytest

from ordinalrd.balance import WeightScheme
from ordinalrd.errors import ManifestError
from ordinalrd.manifest import load_manifest, load_simulation_manifest

STUDY = """
data:
  path: bonds.csv
  outcome: spread
  category: rating
  id: id
scale:
  labels: [BB+, BBB-, BBB]
  threshold: BBB-
covariates: [lev, size]
"""

SIMULATION = """
mode: monte-carlo
estimand: ATT
replications: 10
seed: 4
dgp:
  n: 500
  beta: [1.0, -0.5]
  cutoffs: [-1.0, 0.0, 1.0]
  threshold: 3
  mu0: {terms: [x1, x2], coefficients: [1.0, 2.0, -1.0]}
  mu1: {terms: [x1, x2], coefficients: [3.0, 2.5, -1.0]}
"""


def write(tmp_path: pathlib.Path, text: str, name: str = "manifest.yaml") -> pathlib.Path:
    path = tmp_path / name
    path.write_text(textwrap.dedent(text), encoding="utf-8")
    return path


def test_defaults(tmp_path):
    path = write(tmp_path, STUDY)
    manifest = load_manifest(path)

    assert manifest.data == tmp_path / "bonds.csv"
    assert manifest.output == tmp_path / "output"
    assert manifest.table.scale.threshold_label == "BBB-"
    assert manifest.table.covariates == ("lev", "size")
    assert manifest.schemes == (WeightScheme.ATO, WeightScheme.ATT)
    assert manifest.probit_terms is None
    assert manifest.outcome_terms == ()
    assert manifest.search.critical == 1.96
    assert manifest.inference.significance == 0.10
    assert manifest.seed == 0
    assert not manifest.strict
    assert not manifest.standardize
    assert manifest.sha256 == hashlib.sha256(path.read_bytes()).hexdigest()
    assert manifest.header == f"# manifest_sha256={manifest.sha256} seed=0\n"


def test_every_section(tmp_path):
    manifest = load_manifest(
        write(
            tmp_path,
            STUDY
            + """
strict: true
standardize: true
seed: 12
output: results
exclusions:
  - [lev, ">", 1.5]
probit:
  terms: [lev, np.log(size)]
  empty_category: collapse
  tolerance: 1.0e-9
outcome:
  terms: [lev, "I(lev**2)"]
schemes: [att]
search: {d_min: 0.1, d_max: 0.4, critical: 2.5, min_arm: 10}
inference: {significance: 0.05, influence_factor: 4, level: 0.9}
""",
        )
    )
    assert manifest.strict
    assert manifest.standardize
    assert manifest.seed == 12
    assert manifest.output == tmp_path / "results"
    assert str(manifest.exclusions[0]) == "lev > 1.5"
    assert manifest.probit_terms == ("lev", "np.log(size)")
    assert manifest.optimizer.empty_category == "collapse"
    assert manifest.optimizer.tolerance == 1e-9
    assert manifest.outcome_terms == ("lev", "I(lev**2)")
    assert manifest.schemes == (WeightScheme.ATT,)
    assert (manifest.search.d_min, manifest.search.d_max, manifest.search.min_arm) == (0.1, 0.4, 10)
    assert manifest.inference.influence_factor == 4.0
    assert manifest.pipeline_settings().search == manifest.search
    assert manifest.pipeline_settings().level == 0.9


def test_overrides(tmp_path):
    manifest = load_manifest(write(tmp_path, STUDY)).override(tmp_path / "elsewhere", 99, True)
    assert manifest.output == tmp_path / "elsewhere"
    assert manifest.seed == 99
    assert manifest.strict
    assert load_manifest(write(tmp_path, STUDY)).override() == load_manifest(write(tmp_path, STUDY))


@pytest.mark.parametrize(
    "text, message",
    [
        (STUDY + "colour: blue\n", "colour"),
        (STUDY + "search: {stride: 2}\n", "search.stride"),
        (STUDY.replace("  outcome: spread\n", ""), "data.outcome"),
        (STUDY + "probit: {terms: [lev, leverage]}\n", "leverage"),
        (STUDY + "outcome: {terms: lev}\n", "outcome.terms"),
        (STUDY + "schemes: [ATE]\n", "schemes"),
        (STUDY + "schemes: [NONE]\n", "schemes"),
        (STUDY + "search: {d_min: 0.4, d_max: 0.2}\n", "search"),
        (STUDY + "probit: {empty_category: merge}\n", "empty_category"),
        (STUDY + "exclusions: [[rating, '>', 1]]\n", "rating"),
        (STUDY.replace("threshold: BBB-", "threshold: AAA"), "AAA"),
        ("data: [1, 2]\n", "data"),
        ("data: {path: [\n", "parse"),
        (STUDY + "search: {d_min: wide}\n", "search.d_min"),
        (STUDY + "search: {min_arm: 2.5}\n", "search.min_arm"),
        (STUDY + "probit: {max_iterations: many}\n", "probit.max_iterations"),
        (STUDY + "inference: {level: high}\n", "inference.level"),
        (STUDY + "inference: {level: 1.5}\n", "inference.level"),
        (STUDY + "strict: 'yes'\n", "strict"),
        (STUDY + "seed: abc\n", "seed"),
        (STUDY + "exclusions: {lev: 1}\n", "exclusions"),
        (STUDY + "exclusions: [[lev, '>', big]]\n", r"exclusions\[0\]"),
    ],
)
def test_invalid_manifests(tmp_path, text, message):
    with pytest.raises(ManifestError, match=message):
        load_manifest(write(tmp_path, text))


def test_missing_manifest(tmp_path):
    with pytest.raises(ManifestError, match="read"):
        load_manifest(tmp_path / "absent.yaml")


def test_simulation_manifest(tmp_path):
    manifest = load_simulation_manifest(write(tmp_path, SIMULATION))
    assert manifest.mode == "monte-carlo"
    assert manifest.estimand is WeightScheme.ATT
    assert manifest.replications == 10
    assert manifest.seed == 4
    assert manifest.dgp.n == 500
    assert manifest.dgp.threshold_index == 3
    assert manifest.dgp.fit_outcome_terms == ("x1", "x2")
    assert manifest.interval is None
    assert manifest.override(seed=5).seed == 5


def test_bootstrap_manifest(tmp_path):
    manifest = load_simulation_manifest(
        write(tmp_path, SIMULATION.replace("mode: monte-carlo", "mode: bootstrap") + "resamples: 200\ninterval: [0.1, 0.9]\n")
    )
    assert manifest.resamples == 200
    assert (manifest.interval.e_min, manifest.interval.e_max) == (0.1, 0.9)
    assert manifest.pipeline_settings().interval == manifest.interval


@pytest.mark.parametrize(
    "text, message",
    [
        (SIMULATION.replace("replications: 10", "replications: 0"), "replications"),
        (SIMULATION.replace("mode: monte-carlo", "mode: bootstrap"), "interval"),
        (SIMULATION.replace("mode: monte-carlo", "mode: bootstrap") + "interval: [0.1, 0.9]\nresamples: 50\n", "resamples"),
        (SIMULATION.replace("mode: monte-carlo", "mode: jackknife"), "mode"),
        (SIMULATION.replace("threshold: 3", "threshold: 5"), "threshold"),
        (SIMULATION.replace("[1.0, 2.0, -1.0]", "[1.0, 2.0]"), "mu0"),
        (SIMULATION + "  omit_from_propensity: [x7]\n", "x7"),
        (SIMULATION + "  outcome_terms: [z]\n", "z"),
        (SIMULATION + "interval: [0.9, 0.1]\n", "interval"),
        (SIMULATION + "interval: [0.1, high]\n", r"interval\[1\]"),
        (SIMULATION.replace("beta: [1.0, -0.5]", "beta: 1.0"), "dgp.beta"),
        (SIMULATION.replace("n: 500", "n: many"), "dgp.n"),
        (SIMULATION.replace("[1.0, 2.0, -1.0]", "[1.0, two, -1.0]"), r"dgp.mu0.coefficients\[1\]"),
        (SIMULATION.replace("replications: 10", "replications: lots"), "replications"),
        (SIMULATION + "sample_sizes: [100, lots]\n", r"sample_sizes\[1\]"),
        (SIMULATION + "  correlation: [1, 0]\n", "dgp.correlation"),
    ],
)
def test_invalid_simulation_manifests(tmp_path, text, message):
    with pytest.raises(ManifestError, match=message):
        load_simulation_manifest(write(tmp_path, text))
