"""
Synthetic designs with known ground truth, Monte Carlo studies and the bootstrap.

Data are drawn from the ordered probit law the estimators assume; potential outcomes are
kept in a separate truth record that the estimation code never receives. Every
replication and resample draws from its own stream ``SeedSequence(seed, spawn_key=(i,))``
so results do not depend on worker count and runs can be split and concatenated.
"""

import concurrent.futures
import dataclasses
import functools
import logging
import typing

import numpy as np
import pandas as pd
import scipy.special

from ordinalrd.balance import Interval, WeightScheme
from ordinalrd.dataset import CategoryScale, Dataset
from ordinalrd.errors import AnalysisException, DataError, EstimationError, ManifestError
from ordinalrd.estimate import confidence_interval
from ordinalrd.ext.patsy import design_matrix
from ordinalrd.pipeline import PipelineSettings, run_pipeline

logger = logging.getLogger(__name__)

T = typing.TypeVar("T")
Track = typing.Callable[[typing.Iterable[T]], typing.Iterable[T]]

TRUTH_STREAM = 2**31
MAX_FAILURE_SHARE = 0.10


def _identity(items: typing.Iterable[T]) -> typing.Iterable[T]:
    return items


@dataclasses.dataclass(frozen=True)
class OutcomeFunction:
    """mu(x) = coefficients[0] + sum_k coefficients[k] * term_k(x)."""

    terms: tuple[str, ...]
    coefficients: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.coefficients) != len(self.terms) + 1:
            raise ManifestError(
                f"Outcome function needs an intercept plus one coefficient per term, "
                f"got {len(self.coefficients)} coefficients for {len(self.terms)} terms."
            )

    def __call__(self, frame: pd.DataFrame) -> np.ndarray:
        return design_matrix(self.terms, frame, intercept=True).matrix @ np.asarray(self.coefficients)


@dataclasses.dataclass(frozen=True)
class DgpConfig:
    n: int
    beta: tuple[float, ...]
    cutoffs: tuple[float, ...]
    threshold_index: int
    mu0: OutcomeFunction
    mu1: OutcomeFunction
    noise_sd: float = 1.0
    correlation: tuple[tuple[float, ...], ...] | None = None
    # Misspecification switches, applied when fitting; generation always uses the full law.
    omit_from_propensity: tuple[str, ...] = ()
    outcome_terms: tuple[str, ...] | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n < 2:
            raise ManifestError(f"A simulated sample needs at least two units, got n={self.n}.")
        if np.any(np.diff(self.cutoffs) <= 0):
            raise ManifestError(f"Cutoffs must be strictly increasing, got {list(self.cutoffs)!r}.")
        if unknown := set(self.omit_from_propensity) - set(self.covariate_names):
            raise ManifestError(f"Cannot omit undeclared covariates {sorted(unknown)!r}.")
        if self.noise_sd < 0:
            raise ManifestError("noise_sd must be non-negative.")

    @property
    def p(self) -> int:
        return len(self.beta)

    @property
    def covariate_names(self) -> tuple[str, ...]:
        return tuple(f"x{k}" for k in range(1, self.p + 1))

    @property
    def scale(self) -> CategoryScale:
        labels = tuple(f"r{j}" for j in range(1, len(self.cutoffs) + 2))
        return CategoryScale(labels=labels, threshold_index=self.threshold_index)

    @property
    def probit_terms(self) -> tuple[str, ...]:
        return tuple(name for name in self.covariate_names if name not in self.omit_from_propensity)

    @property
    def fit_outcome_terms(self) -> tuple[str, ...]:
        if self.outcome_terms is not None:
            return self.outcome_terms
        return tuple(dict.fromkeys(self.mu0.terms + self.mu1.terms))

    def pipeline_settings(self, interval: Interval | None = None, **overrides: typing.Any) -> PipelineSettings:
        return PipelineSettings(
            probit_terms=self.probit_terms,
            outcome_terms=self.fit_outcome_terms,
            interval=interval,
            **overrides,
        )

    def draw_covariates(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.correlation is None:
            return rng.standard_normal((n, self.p))
        return rng.multivariate_normal(np.zeros(self.p), np.asarray(self.correlation), size=n, method="cholesky")

    def true_propensity(self, x: np.ndarray) -> np.ndarray:
        return scipy.special.ndtr(x @ np.asarray(self.beta) - self.cutoffs[self.threshold_index - 2])


@dataclasses.dataclass(frozen=True, eq=False)
class TruthRecord:
    """Potential outcomes and true propensities; for oracles only."""

    y0: np.ndarray
    y1: np.ndarray
    e: np.ndarray

    @property
    def effect(self) -> np.ndarray:
        return self.y1 - self.y0


@dataclasses.dataclass(frozen=True, eq=False)
class GeneratedSample:
    dataset: Dataset
    truth: TruthRecord


def generate(config: DgpConfig, seed: int | np.random.SeedSequence | None = None) -> GeneratedSample:
    rng = np.random.default_rng(config.seed if seed is None else seed)
    x = config.draw_covariates(rng, config.n)
    latent = x @ np.asarray(config.beta) + rng.standard_normal(config.n)
    category = np.searchsorted(np.asarray(config.cutoffs), latent, side="left") + 1

    counts = np.bincount(category, minlength=len(config.cutoffs) + 2)[1:]
    if np.any(counts == 0):
        raise DataError(f"Simulated sample has an empty category; category frequencies {counts.tolist()!r}.")

    frame = pd.DataFrame(x, columns=list(config.covariate_names))
    y0 = config.mu0(frame) + config.noise_sd * rng.standard_normal(config.n)
    y1 = config.mu1(frame) + config.noise_sd * rng.standard_normal(config.n)
    treated = category >= config.threshold_index

    width = len(str(config.n))
    dataset = Dataset(
        scale=config.scale,
        ids=np.array([f"u{i:0{width}d}" for i in range(1, config.n + 1)], dtype=object),
        category=category,
        outcome=np.where(treated, y1, y0),
        covariates=x,
        covariate_names=config.covariate_names,
    )
    return GeneratedSample(dataset=dataset, truth=TruthRecord(y0=y0, y1=y1, e=config.true_propensity(x)))


@dataclasses.dataclass(frozen=True, eq=False)
class TruthPopulation:
    """A large draw from the covariate law with each unit's true propensity and effect."""

    e: np.ndarray
    effect: np.ndarray

    def estimand(self, estimand: WeightScheme, subpopulation: Interval | None = None) -> float:
        """E_h[mu1 - mu0] over the units whose true propensity lies in the subpopulation."""
        inside = np.ones(len(self.e), dtype=bool) if subpopulation is None else subpopulation.contains(self.e)
        tilting = estimand.tilting(self.e[inside])
        return float(np.sum(tilting * self.effect[inside]) / np.sum(tilting))


def truth_population(config: DgpConfig, draws: int = 1_000_000) -> TruthPopulation:
    rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(TRUTH_STREAM,)))
    x = config.draw_covariates(rng, draws)
    frame = pd.DataFrame(x, columns=list(config.covariate_names))
    return TruthPopulation(e=config.true_propensity(x), effect=config.mu1(frame) - config.mu0(frame))


def true_estimand(
    config: DgpConfig,
    estimand: WeightScheme,
    subpopulation: Interval | None = None,
    draws: int = 1_000_000,
) -> float:
    return truth_population(config, draws).estimand(estimand, subpopulation)


@dataclasses.dataclass(frozen=True)
class ReplicationRecord:
    index: int
    tau: float = float("nan")
    se: float = float("nan")
    p_value: float = float("nan")
    n0: int = 0
    n1: int = 0
    e_min: float = float("nan")
    e_max: float = float("nan")
    error: str = ""


def _replicate(config: DgpConfig, settings: PipelineSettings, estimand: WeightScheme, index: int) -> ReplicationRecord:
    try:
        sample = generate(config, np.random.SeedSequence(config.seed, spawn_key=(index,)))
        estimate = run_pipeline(sample.dataset, estimand, settings).estimate
    except AnalysisException as e:
        logger.info("Replication %(index)d failed: %(error)s", {"index": index, "error": e.message})
        return ReplicationRecord(index=index, error=f"{type(e).__name__}: {e.message}")
    return ReplicationRecord(
        index=index,
        tau=estimate.tau,
        se=estimate.se,
        p_value=estimate.p_value,
        n0=estimate.n0,
        n1=estimate.n1,
        e_min=estimate.interval.e_min,
        e_max=estimate.interval.e_max,
    )


def _map(
    function: typing.Callable[[int], T],
    indices: typing.Sequence[int],
    workers: int,
    track: Track,
) -> list[T]:
    if workers <= 1:
        return list(track(map(function, indices)))
    with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as executor:
        return list(track(executor.map(function, indices)))


def _truths(population: TruthPopulation, estimand: WeightScheme, records: pd.DataFrame) -> np.ndarray:
    """The true estimand on each replication's own interval; NaN for failed replications."""
    cache: dict[tuple[float, float], float] = {}
    values = np.full(len(records), np.nan)
    for position, (e_min, e_max, error) in enumerate(zip(records["e_min"], records["e_max"], records["error"])):
        if error:
            continue
        key = (float(e_min), float(e_max))
        if key not in cache:
            cache[key] = population.estimand(estimand, Interval(*key))
        values[position] = cache[key]
    return values


@dataclasses.dataclass(frozen=True, eq=False)
class McReport:
    """
    Monte Carlo results. Each record carries the interval its replication estimated on and
    the true estimand there, so bias and coverage stay meaningful when intervals are searched.
    """

    estimand: WeightScheme
    records: pd.DataFrame
    level: float = 0.95

    @property
    def replications(self) -> int:
        return len(self.records)

    @property
    def succeeded(self) -> pd.DataFrame:
        return self.records[self.records["error"] == ""]

    @property
    def failures(self) -> int:
        return self.replications - len(self.succeeded)

    @property
    def truth(self) -> float:
        """Mean true estimand over successful replications; constant on a fixed interval."""
        return float(self.succeeded["truth"].mean())

    @property
    def mean_bias(self) -> float:
        return float((self.succeeded["tau"] - self.succeeded["truth"]).mean())

    @property
    def mc_sd(self) -> float:
        return float(self.succeeded["tau"].std(ddof=1))

    @property
    def mc_standard_error(self) -> float:
        return self.mc_sd / np.sqrt(len(self.succeeded))

    @property
    def mean_se(self) -> float:
        return float(self.succeeded["se"].mean())

    @property
    def coverage(self) -> float:
        succeeded = self.succeeded
        truth = succeeded["truth"].to_numpy()
        lower, upper = confidence_interval(succeeded["tau"].to_numpy(), succeeded["se"].to_numpy(), self.level)
        return float(np.mean((lower <= truth) & (truth <= upper)))

    def pass_rate(self, significance: float) -> float:
        """Share of replications whose p-value is at least ``significance``."""
        return float(np.mean(self.succeeded["p_value"] >= significance))

    def summary(self) -> dict[str, typing.Any]:
        return {
            "estimand": str(self.estimand),
            "truth": self.truth,
            "replications": self.replications,
            "failures": self.failures,
            "mean_bias": self.mean_bias,
            "mc_sd": self.mc_sd,
            "mc_standard_error": self.mc_standard_error,
            "mean_se": self.mean_se,
            "level": self.level,
            "coverage": self.coverage,
        }


def monte_carlo(
    config: DgpConfig,
    settings: PipelineSettings,
    estimand: WeightScheme,
    replications: int,
    start: int = 0,
    workers: int = 1,
    track: Track = _identity,
) -> McReport:
    """
    Run the pipeline on ``replications`` fresh samples and compare with the true estimand.

    Each replication is compared with the truth on the interval it estimated on: the fixed
    interval of ``settings``, or the one its own balance search selected. Failed
    replications are recorded; more than 10% is an error.
    """
    if replications < 2:
        raise ManifestError(f"A Monte Carlo study needs at least two replications, got {replications}.")

    replicate = functools.partial(_replicate, config, settings, estimand)
    records = _map(replicate, range(start, start + replications), workers, track)
    frame = pd.DataFrame([dataclasses.asdict(record) for record in records])
    frame["truth"] = _truths(truth_population(config), estimand, frame)

    report = McReport(estimand=estimand, records=frame, level=settings.level)
    if report.failures > MAX_FAILURE_SHARE * replications:
        first = frame.loc[frame["error"] != "", "error"].iloc[0]
        raise EstimationError(f"{report.failures} of {replications} replications failed; first error: {first}")
    if report.failures:
        logger.warning("%(n)d of %(total)d replications failed", {"n": report.failures, "total": replications})
    return report


def monte_carlo_sweep(
    config: DgpConfig,
    settings: PipelineSettings,
    estimand: WeightScheme,
    replications: int,
    sample_sizes: typing.Sequence[int],
    workers: int = 1,
    track: Track = _identity,
) -> dict[int, McReport]:
    """The same study at several sample sizes, for consistency trends."""
    return {
        n: monte_carlo(dataclasses.replace(config, n=n), settings, estimand, replications, workers=workers, track=track)
        for n in sample_sizes
    }


@dataclasses.dataclass(frozen=True, eq=False)
class BootstrapResult:
    se: float
    estimates: np.ndarray
    skipped: int

    @property
    def resamples(self) -> int:
        return len(self.estimates) + self.skipped


def _resample(dataset: Dataset, settings: PipelineSettings, estimand: WeightScheme, seed: int, index: int) -> float | None:
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))
    try:
        resample = dataset.take(rng.integers(0, dataset.n, dataset.n))
        return run_pipeline(resample, estimand, settings).estimate.tau
    except AnalysisException as e:
        logger.info("Resample %(index)d skipped: %(error)s", {"index": index, "error": e.message})
        return None


def bootstrap_se(
    dataset: Dataset,
    settings: PipelineSettings,
    estimand: WeightScheme,
    resamples: int,
    seed: int = 0,
    workers: int = 1,
    track: Track = _identity,
) -> BootstrapResult:
    """Unit-level nonparametric bootstrap refitting the probit and outcome models on a fixed interval."""
    if resamples < 100:
        raise ManifestError(f"The bootstrap needs at least 100 resamples, got {resamples}.")
    if settings.interval is None:
        raise ManifestError("The bootstrap refits on a fixed interval; set one in the pipeline settings.")

    results = _map(functools.partial(_resample, dataset, settings, estimand, seed), range(resamples), workers, track)
    estimates = np.array([tau for tau in results if tau is not None], dtype=float)
    skipped = resamples - len(estimates)
    if skipped:
        logger.warning("Skipped %(n)d of %(total)d resamples", {"n": skipped, "total": resamples})
    if len(estimates) < 2:
        raise EstimationError(f"Only {len(estimates)} bootstrap resamples succeeded.")

    return BootstrapResult(se=float(np.std(estimates, ddof=1)), estimates=estimates, skipped=skipped)
