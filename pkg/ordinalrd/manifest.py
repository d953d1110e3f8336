"""
YAML manifests for analysis runs and simulation studies.

A manifest fully determines a run: every key not listed in docs/manifest.md is rejected
and every default is the documented one. Relative paths resolve against the manifest's
own directory.
"""

import dataclasses
import hashlib
import logging
import pathlib
import typing

import yaml

from ordinalrd.balance import Interval, SearchSettings, WeightScheme
from ordinalrd.dataset import CategoryScale, ExclusionRule, TableSpec
from ordinalrd.errors import AnalysisException, ManifestError
from ordinalrd.ext.patsy import variables
from ordinalrd.pipeline import PipelineSettings
from ordinalrd.probit import OptimizerSettings
from ordinalrd.simlab import DgpConfig, OutcomeFunction

logger = logging.getLogger(__name__)

MISSING = object()


@dataclasses.dataclass(frozen=True)
class InferenceSettings:
    significance: float = 0.10
    influence_factor: float = 5.0
    level: float = 0.95

    def __post_init__(self) -> None:
        for name in ("significance", "level"):
            if not 0 < getattr(self, name) < 1:
                raise ManifestError(f"'inference.{name}' must lie strictly between 0 and 1, got {getattr(self, name)!r}.")
        if not self.influence_factor > 0:
            raise ManifestError(f"'inference.influence_factor' must be positive, got {self.influence_factor!r}.")


def _convert(key: str, value: typing.Any, kind: type[int] | type[float]) -> typing.Any:
    """``value`` as an int or float, or a ManifestError naming ``key``."""
    noun = "an integer" if kind is int else "a number"
    if isinstance(value, bool) or (kind is int and isinstance(value, float) and not value.is_integer()):
        raise ManifestError(f"Manifest key '{key}' must be {noun}, got {value!r}.")
    try:
        return kind(value)
    except (TypeError, ValueError) as e:
        raise ManifestError(f"Manifest key '{key}' must be {noun}, got {value!r}.") from e


class Section:
    """A mapping from the manifest that remembers which keys were read."""

    def __init__(self, tree: typing.Any, path: str = "") -> None:
        if tree is None:
            tree = {}
        if not isinstance(tree, dict):
            raise ManifestError(f"Manifest key '{path or '<root>'}' must be a mapping.")
        self.tree = tree
        self.path = path
        self.seen: set[str] = set()

    def key(self, name: str) -> str:
        return f"{self.path}.{name}" if self.path else name

    def get(self, name: str, default: typing.Any = MISSING) -> typing.Any:
        self.seen.add(name)
        if name in self.tree and self.tree[name] is not None:
            return self.tree[name]
        if default is MISSING:
            raise ManifestError(f"Manifest is missing required key '{self.key(name)}'.")
        return default

    def section(self, name: str, required: bool = False) -> "Section":
        return Section(self.get(name, MISSING if required else None), self.key(name))

    def items(self, name: str, default: typing.Any = MISSING) -> list | None:
        value = self.get(name, default)
        if value is not None and not isinstance(value, list):
            raise ManifestError(f"Manifest key '{self.key(name)}' must be a list.")
        return value

    def strings(self, name: str, default: typing.Any = MISSING) -> tuple[str, ...] | None:
        value = self.items(name, default)
        return None if value is None else tuple(str(item) for item in value)

    def number(self, name: str, default: typing.Any = MISSING, kind: type[int] | type[float] = float) -> typing.Any:
        return _convert(self.key(name), self.get(name, default), kind)

    def numbers(self, name: str, default: typing.Any = MISSING, kind: type[int] | type[float] = float) -> tuple:
        value = self.items(name, default)
        assert value is not None
        return tuple(_convert(f"{self.key(name)}[{i}]", item, kind) for i, item in enumerate(value))

    def flag(self, name: str, default: bool) -> bool:
        value = self.get(name, default)
        if not isinstance(value, bool):
            raise ManifestError(f"Manifest key '{self.key(name)}' must be true or false, got {value!r}.")
        return value

    def close(self) -> None:
        if unknown := sorted(set(self.tree) - self.seen):
            raise ManifestError(f"Unknown manifest keys: {', '.join(self.key(name) for name in unknown)}.")


def _build(name: str, factory: typing.Callable[..., typing.Any], **kwargs: typing.Any) -> typing.Any:
    """Construct a settings object, reporting bad values against the manifest key."""
    try:
        return factory(**kwargs)
    except AnalysisException as e:
        raise ManifestError(f"Invalid '{name}' settings: {e.message}") from e
    except (TypeError, ValueError) as e:
        raise ManifestError(f"Invalid '{name}' settings: {e}") from e


def _read(path: pathlib.Path) -> tuple[Section, str]:
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise ManifestError(f"Could not read manifest {path}: {e.strerror}") from e
    try:
        tree = yaml.safe_load(raw)
    except yaml.YAMLError as e:
        raise ManifestError(f"Could not parse manifest {path}: {e}") from e
    return Section(tree), hashlib.sha256(raw).hexdigest()


def _check_terms(name: str, terms: typing.Sequence[str] | None, covariates: typing.Sequence[str]) -> None:
    if terms is None:
        return
    if undeclared := variables(terms) - set(covariates):
        raise ManifestError(f"Terms in '{name}' reference undeclared covariates: {', '.join(sorted(undeclared))}.")


def _search(root: Section) -> SearchSettings:
    search = root.section("search")
    defaults = SearchSettings()
    settings = _build(
        "search",
        SearchSettings,
        d_min=search.number("d_min", defaults.d_min),
        d_max=search.number("d_max", defaults.d_max),
        step=search.number("step", defaults.step),
        critical=search.number("critical", defaults.critical),
        min_arm=search.number("min_arm", defaults.min_arm, int),
        asymmetric_step=search.number("asymmetric_step", defaults.asymmetric_step),
    )
    search.close()
    return settings


def _optimizer(probit: Section) -> OptimizerSettings:
    defaults = OptimizerSettings()
    empty_category = probit.get("empty_category", defaults.empty_category)
    if empty_category not in ("error", "collapse"):
        raise ManifestError(f"'probit.empty_category' must be 'error' or 'collapse', got {empty_category!r}.")
    return _build(
        "probit",
        OptimizerSettings,
        tolerance=probit.number("tolerance", defaults.tolerance),
        max_iterations=probit.number("max_iterations", defaults.max_iterations, int),
        empty_category=empty_category,
    )


def _schemes(names: typing.Sequence[str]) -> tuple[WeightScheme, ...]:
    try:
        schemes = tuple(WeightScheme(name.upper()) for name in names)
    except ValueError as e:
        raise ManifestError(f"'schemes' entries must be ATO or ATT: {e}") from e
    if WeightScheme.NONE in schemes or not schemes:
        raise ManifestError("'schemes' must list at least one of ATO and ATT.")
    return schemes


def _interval(section: Section, name: str) -> Interval | None:
    if section.get(name, None) is None:
        return None
    bounds = section.numbers(name)
    if len(bounds) != 2:
        raise ManifestError(f"'{section.key(name)}' must be a pair [e_min, e_max].")
    return _build(section.key(name), Interval, e_min=bounds[0], e_max=bounds[1])


@dataclasses.dataclass(frozen=True)
class AnalysisManifest:
    path: pathlib.Path
    sha256: str
    data: pathlib.Path
    table: TableSpec
    standardize: bool
    exclusions: tuple[ExclusionRule, ...]
    probit_terms: tuple[str, ...] | None
    optimizer: OptimizerSettings
    outcome_terms: tuple[str, ...]
    schemes: tuple[WeightScheme, ...]
    search: SearchSettings
    inference: InferenceSettings
    output: pathlib.Path
    seed: int

    @property
    def strict(self) -> bool:
        return self.table.strict

    @property
    def header(self) -> str:
        return f"# manifest_sha256={self.sha256} seed={self.seed}\n"

    def pipeline_settings(self) -> PipelineSettings:
        return PipelineSettings(
            probit_terms=self.probit_terms,
            outcome_terms=self.outcome_terms,
            optimizer=self.optimizer,
            search=self.search,
            level=self.inference.level,
        )

    def override(
        self,
        output: pathlib.Path | None = None,
        seed: int | None = None,
        strict: bool | None = None,
    ) -> "AnalysisManifest":
        manifest = self
        if output is not None:
            manifest = dataclasses.replace(manifest, output=output)
        if seed is not None:
            manifest = dataclasses.replace(manifest, seed=seed)
        if strict is not None:
            manifest = dataclasses.replace(manifest, table=dataclasses.replace(manifest.table, strict=strict))
        return manifest


def load_manifest(path: pathlib.Path) -> AnalysisManifest:
    root, sha256 = _read(path)
    base = path.parent

    data = root.section("data", required=True)
    scale_section = root.section("scale", required=True)
    labels = scale_section.strings("labels")
    threshold = str(scale_section.get("threshold"))
    scale_section.close()
    assert labels is not None
    scale = CategoryScale.from_labels(labels, threshold)

    covariates = root.strings("covariates")
    assert covariates is not None
    table = TableSpec(
        outcome=str(data.get("outcome")),
        category=str(data.get("category")),
        covariates=covariates,
        scale=scale,
        id=None if (unit_id := data.get("id", None)) is None else str(unit_id),
        delimiter=str(data.get("delimiter", ",")),
        strict=root.flag("strict", False),
    )
    data_path = base / str(data.get("path"))
    data.close()

    exclusions = []
    for position, entry in enumerate(root.items("exclusions", []) or []):
        if not isinstance(entry, list) or len(entry) != 3:
            raise ManifestError(f"Each 'exclusions' entry must be [covariate, comparator, bound], got {entry!r}.")
        covariate, comparator, bound = entry
        if covariate not in covariates:
            raise ManifestError(f"Exclusion rule names an undeclared covariate {covariate!r}.")
        bound = _convert(f"exclusions[{position}]", bound, float)
        exclusions.append(ExclusionRule(str(covariate), str(comparator), bound))

    probit = root.section("probit")
    probit_terms = probit.strings("terms", None)
    optimizer = _optimizer(probit)
    probit.close()
    _check_terms("probit.terms", probit_terms, covariates)

    outcome = root.section("outcome")
    outcome_terms = outcome.strings("terms", [])
    outcome.close()
    assert outcome_terms is not None
    _check_terms("outcome.terms", outcome_terms, covariates)

    inference_section = root.section("inference")
    defaults = InferenceSettings()
    inference = InferenceSettings(
        significance=inference_section.number("significance", defaults.significance),
        influence_factor=inference_section.number("influence_factor", defaults.influence_factor),
        level=inference_section.number("level", defaults.level),
    )
    inference_section.close()

    manifest = AnalysisManifest(
        path=path,
        sha256=sha256,
        data=data_path,
        table=table,
        standardize=root.flag("standardize", False),
        exclusions=tuple(exclusions),
        probit_terms=probit_terms,
        optimizer=optimizer,
        outcome_terms=outcome_terms,
        schemes=_schemes(root.strings("schemes", ["ATO", "ATT"]) or ()),
        search=_search(root),
        inference=inference,
        output=base / str(root.get("output", "output")),
        seed=root.number("seed", 0, int),
    )
    root.close()
    logger.info("Loaded manifest %(path)s (sha256 %(sha256)s)", {"path": str(path), "sha256": sha256})
    return manifest


@dataclasses.dataclass(frozen=True)
class SimulationManifest:
    path: pathlib.Path
    sha256: str
    dgp: DgpConfig
    mode: typing.Literal["monte-carlo", "bootstrap"]
    estimand: WeightScheme
    replications: int
    resamples: int
    sample_sizes: tuple[int, ...]
    interval: Interval | None
    search: SearchSettings
    optimizer: OptimizerSettings
    inference: InferenceSettings
    output: pathlib.Path

    @property
    def seed(self) -> int:
        return self.dgp.seed

    @property
    def header(self) -> str:
        return f"# manifest_sha256={self.sha256} seed={self.seed}\n"

    def pipeline_settings(self) -> PipelineSettings:
        return self.dgp.pipeline_settings(
            self.interval, optimizer=self.optimizer, search=self.search, level=self.inference.level
        )

    def override(self, output: pathlib.Path | None = None, seed: int | None = None) -> "SimulationManifest":
        manifest = self
        if output is not None:
            manifest = dataclasses.replace(manifest, output=output)
        if seed is not None:
            manifest = dataclasses.replace(manifest, dgp=dataclasses.replace(manifest.dgp, seed=seed))
        return manifest


def _matrix(section: Section, name: str) -> tuple[tuple[float, ...], ...] | None:
    rows = section.items(name, None)
    if rows is None:
        return None
    key = section.key(name)
    if not all(isinstance(row, list) for row in rows):
        raise ManifestError(f"Manifest key '{key}' must be a list of rows.")
    return tuple(
        tuple(_convert(f"{key}[{i}][{j}]", value, float) for j, value in enumerate(row)) for i, row in enumerate(rows)
    )


def _outcome_function(section: Section) -> OutcomeFunction:
    terms = section.strings("terms", [])
    coefficients = section.numbers("coefficients")
    section.close()
    assert terms is not None
    return _build(section.path, OutcomeFunction, terms=terms, coefficients=coefficients)


def _dgp(root: Section) -> DgpConfig:
    dgp = root.section("dgp", required=True)
    beta = dgp.numbers("beta")
    cutoffs = dgp.numbers("cutoffs")
    threshold = dgp.number("threshold", kind=int)
    if not 2 <= threshold <= len(cutoffs) + 1:
        raise ManifestError(f"'dgp.threshold' must lie in 2..{len(cutoffs) + 1}, got {threshold}.")

    correlation = _matrix(dgp, "correlation")
    outcome_terms = dgp.strings("outcome_terms", None)
    config = _build(
        "dgp",
        DgpConfig,
        n=dgp.number("n", kind=int),
        beta=beta,
        cutoffs=cutoffs,
        threshold_index=threshold,
        mu0=_outcome_function(dgp.section("mu0", required=True)),
        mu1=_outcome_function(dgp.section("mu1", required=True)),
        noise_sd=dgp.number("noise_sd", 1.0),
        correlation=correlation,
        omit_from_propensity=dgp.strings("omit_from_propensity", []),
        outcome_terms=outcome_terms,
        seed=root.number("seed", 0, int),
    )
    dgp.close()
    for name, terms in (("dgp.mu0.terms", config.mu0.terms), ("dgp.mu1.terms", config.mu1.terms)):
        _check_terms(name, terms, config.covariate_names)
    _check_terms("dgp.outcome_terms", outcome_terms, config.covariate_names)
    return config


def load_simulation_manifest(path: pathlib.Path) -> SimulationManifest:
    root, sha256 = _read(path)

    mode = root.get("mode", "monte-carlo")
    if mode not in ("monte-carlo", "bootstrap"):
        raise ManifestError(f"'mode' must be 'monte-carlo' or 'bootstrap', got {mode!r}.")

    estimand = _schemes([str(root.get("estimand", "ATO"))])[0]
    replications = root.number("replications", 500, int)
    if mode == "monte-carlo" and replications < 2:
        raise ManifestError(f"'replications' must be at least 2, got {replications}.")
    resamples = root.number("resamples", 1000, int)
    if mode == "bootstrap" and resamples < 100:
        raise ManifestError(f"'resamples' must be at least 100, got {resamples}.")

    interval = _interval(root, "interval")
    if mode == "bootstrap" and interval is None:
        raise ManifestError("Bootstrap studies need a fixed 'interval'.")

    probit = root.section("probit")
    optimizer = _optimizer(probit)
    probit.close()

    inference_section = root.section("inference")
    defaults = InferenceSettings()
    inference = InferenceSettings(
        significance=inference_section.number("significance", defaults.significance),
        level=inference_section.number("level", defaults.level),
    )
    inference_section.close()

    manifest = SimulationManifest(
        path=path,
        sha256=sha256,
        dgp=_dgp(root),
        mode=mode,
        estimand=estimand,
        replications=replications,
        resamples=resamples,
        sample_sizes=root.numbers("sample_sizes", [], int),
        interval=interval,
        search=_search(root),
        optimizer=optimizer,
        inference=inference,
        output=path.parent / str(root.get("output", "output")),
    )
    root.close()
    return manifest
