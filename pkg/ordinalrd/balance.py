"""
Covariate balance within propensity-score intervals.

Balance is measured by the standardized bias: the weighted difference in arm means over
the unweighted two-sample standard error. The analysis subsample is the widest interval
around 0.5 in which every covariate stays balanced, found first symmetrically and then
by growing one side at a time.
"""

import dataclasses
import enum
import logging
import typing

import numpy as np
import pandas as pd

from ordinalrd.dataset import Dataset
from ordinalrd.errors import BalanceError, DegenerateCovariateError
from ordinalrd.probit import PROPENSITY_CLAMP

logger = logging.getLogger(__name__)

DECIMALS = 10


class WeightScheme(str, enum.Enum):
    ATO = "ATO"
    ATT = "ATT"
    NONE = "NONE"

    def __str__(self) -> str:
        return self.value

    def tilting(self, e: np.ndarray) -> np.ndarray:
        """h(x) defining the target population."""
        if self is WeightScheme.ATO:
            return e * (1.0 - e)
        if self is WeightScheme.ATT:
            return e
        return np.ones_like(e)


@dataclasses.dataclass(frozen=True)
class SearchSettings:
    d_min: float = 0.05
    d_max: float = 0.49
    step: float = 0.01
    critical: float = 1.96
    min_arm: int = 5
    asymmetric_step: float = 0.01

    def __post_init__(self) -> None:
        if not (0 < self.d_min < self.d_max < 0.5) or self.step <= 0:
            raise BalanceError(
                f"Search grid needs 0 < d_min < d_max < 0.5 and step > 0, "
                f"got d_min={self.d_min}, d_max={self.d_max}, step={self.step}."
            )
        if self.min_arm < 2:
            raise BalanceError("min_arm must be at least 2 so arm variances exist.")
        if self.asymmetric_step <= 0 or self.critical <= 0:
            raise BalanceError("asymmetric_step and critical must be positive.")

    @property
    def grid(self) -> np.ndarray:
        count = int(np.floor((self.d_max - self.d_min) / self.step + 1e-9)) + 1
        return np.round(self.d_min + self.step * np.arange(count), DECIMALS)

    @property
    def floor(self) -> float:
        return round(0.5 - self.d_max, DECIMALS)

    @property
    def ceiling(self) -> float:
        return round(0.5 + self.d_max, DECIMALS)


@dataclasses.dataclass(frozen=True)
class Interval:
    """Open propensity window (e_min, e_max)."""

    e_min: float
    e_max: float

    def __post_init__(self) -> None:
        if not 0 < self.e_min < self.e_max < 1:
            raise BalanceError(f"Interval needs 0 < e_min < e_max < 1, got ({self.e_min}, {self.e_max}).")

    @classmethod
    def symmetric(cls, d: float) -> "Interval":
        return cls(round(0.5 - d, DECIMALS), round(0.5 + d, DECIMALS))

    def contains(self, e_hat: np.ndarray) -> np.ndarray:
        return (e_hat > self.e_min) & (e_hat < self.e_max)

    def __contains__(self, other: "Interval") -> bool:
        return self.e_min <= other.e_min and other.e_max <= self.e_max

    def __str__(self) -> str:
        return f"({self.e_min:g}, {self.e_max:g})"


def compute_weights(
    e_hat: np.ndarray,
    treatment: np.ndarray,
    scheme: WeightScheme,
    ids: typing.Sequence[str] | None = None,
) -> np.ndarray:
    """Balancing weights: w1 = h/e for treated units, w0 = h/(1 - e) for controls."""
    e_hat = np.asarray(e_hat, dtype=float)
    treated = np.asarray(treatment) == 1

    if scheme is WeightScheme.NONE:
        return np.ones_like(e_hat)

    if scheme is WeightScheme.ATO:
        return np.where(treated, 1.0 - e_hat, e_hat)

    extreme = ~treated & (e_hat >= 1.0 - 2 * PROPENSITY_CLAMP)
    for i in np.flatnonzero(extreme):
        unit = ids[i] if ids is not None else str(i)
        logger.warning(
            "Control unit %(unit)s has e-hat at the clamp, ATT weight %(w).3g",
            {"unit": unit, "w": e_hat[i] / (1 - e_hat[i])},
        )
    return np.where(treated, 1.0, e_hat / (1.0 - e_hat))


def standardized_bias(x: np.ndarray, treatment: np.ndarray, weights: np.ndarray) -> float:
    """
    Weighted mean difference (treated minus control) over sqrt(s0^2/n0 + s1^2/n1).

    The variances are unweighted, so unit weights give the two-sample t-statistic.
    """
    x, weights = np.asarray(x, dtype=float), np.asarray(weights, dtype=float)
    treated = np.asarray(treatment) == 1
    n1, n0 = int(treated.sum()), int((~treated).sum())
    if n1 < 2 or n0 < 2:
        raise BalanceError(f"Standardized bias needs at least two units per arm, got {n0} controls and {n1} treated.")

    denominator = np.sqrt(np.var(x[treated], ddof=1) / n1 + np.var(x[~treated], ddof=1) / n0)
    if denominator == 0:
        raise DegenerateCovariateError("Covariate is constant within both arms.")

    mean1 = np.sum(weights[treated] * x[treated]) / np.sum(weights[treated])
    mean0 = np.sum(weights[~treated] * x[~treated]) / np.sum(weights[~treated])
    return float((mean1 - mean0) / denominator)


@dataclasses.dataclass(frozen=True)
class BalanceReport:
    interval: Interval
    scheme: WeightScheme
    n0: int
    n1: int
    sb: pd.Series
    critical: float
    degenerate: tuple[str, ...] = ()

    @property
    def max_abs_sb(self) -> float:
        return float(self.sb.abs().max()) if len(self.sb) else 0.0

    @property
    def balanced(self) -> bool:
        return bool((self.sb.abs() < self.critical).all())

    def row(self) -> dict[str, typing.Any]:
        return {
            "e_min": self.interval.e_min,
            "e_max": self.interval.e_max,
            "n0": self.n0,
            "n1": self.n1,
            "max_abs_sb": self.max_abs_sb,
            "balanced": self.balanced,
            **{f"sb_{name}": value for name, value in self.sb.items()},
        }


def balance_table(
    dataset: Dataset,
    e_hat: np.ndarray,
    interval: Interval,
    scheme: WeightScheme,
    critical: float = 1.96,
) -> BalanceReport:
    """Standardized bias of every covariate on the subsample inside the interval."""
    inside = interval.contains(e_hat)
    treatment = dataset.treatment[inside]
    weights = compute_weights(e_hat[inside], treatment, scheme, ids=dataset.ids[inside])

    values: dict[str, float] = {}
    degenerate = []
    for k, name in enumerate(dataset.covariate_names):
        try:
            values[name] = standardized_bias(dataset.covariates[inside, k], treatment, weights)
        except DegenerateCovariateError:
            logger.warning(
                "Covariate %(name)s is constant in both arms of %(interval)s, ignoring it",
                {"name": name, "interval": str(interval)},
            )
            degenerate.append(name)
        except BalanceError as e:
            raise BalanceError(f"Covariate {name!r} in {interval}: {e.message}") from e

    return BalanceReport(
        interval=interval,
        scheme=scheme,
        n0=int((treatment == 0).sum()),
        n1=int((treatment == 1).sum()),
        sb=pd.Series(values, dtype=float),
        critical=critical,
        degenerate=tuple(degenerate),
    )


def arm_sizes(dataset: Dataset, e_hat: np.ndarray, interval: Interval) -> tuple[int, int]:
    treatment = dataset.treatment[interval.contains(e_hat)]
    return int((treatment == 0).sum()), int((treatment == 1).sum())


@dataclasses.dataclass(frozen=True)
class SymmetricStep:
    d: float
    interval: Interval
    n0: int
    n1: int
    report: BalanceReport | None

    @property
    def feasible(self) -> bool:
        return self.report is not None

    @property
    def balanced(self) -> bool:
        return self.report is not None and self.report.balanced


@dataclasses.dataclass(frozen=True)
class SymmetricSearch:
    scheme: WeightScheme
    trace: tuple[SymmetricStep, ...]
    selected: float | None

    @property
    def all_balanced(self) -> list[float]:
        return [step.d for step in self.trace if step.balanced]

    @property
    def interval(self) -> Interval | None:
        return None if self.selected is None else Interval.symmetric(self.selected)

    @property
    def report(self) -> BalanceReport | None:
        return next((step.report for step in self.trace if step.d == self.selected), None)

    def table(self) -> pd.DataFrame:
        """One row per grid point: d, interval, arm sizes and per-covariate SB."""
        rows = []
        for step in self.trace:
            if step.report is None:
                row = {"e_min": step.interval.e_min, "e_max": step.interval.e_max, "n0": step.n0, "n1": step.n1}
                rows.append({"d": step.d, **row, "feasible": False, "balanced": False})
            else:
                rows.append({"d": step.d, **step.report.row(), "feasible": True})
        return pd.DataFrame(rows)


def search_symmetric(
    dataset: Dataset,
    e_hat: np.ndarray,
    scheme: WeightScheme,
    settings: SearchSettings = SearchSettings(),
) -> SymmetricSearch:
    """
    Evaluate (0.5 - d, 0.5 + d) over the grid in ascending d.

    The selected d is the last one before the first imbalance among feasible intervals;
    grid points with fewer than min_arm units in an arm are infeasible and skipped.
    The full trace is kept. No balanced interval gives ``selected=None``.
    """
    trace = []
    selected = None
    stopped = False
    for d in settings.grid:
        interval = Interval.symmetric(float(d))
        n0, n1 = arm_sizes(dataset, e_hat, interval)
        if min(n0, n1) < settings.min_arm:
            logger.debug("d=%(d)g infeasible with n0=%(n0)d n1=%(n1)d", {"d": d, "n0": n0, "n1": n1})
            trace.append(SymmetricStep(d=float(d), interval=interval, n0=n0, n1=n1, report=None))
            continue

        report = balance_table(dataset, e_hat, interval, scheme, settings.critical)
        trace.append(SymmetricStep(d=float(d), interval=interval, n0=n0, n1=n1, report=report))
        if stopped:
            continue
        if report.balanced:
            selected = float(d)
        else:
            stopped = True

    if selected is None:
        logger.warning("No balanced symmetric interval for %(scheme)s weights", {"scheme": str(scheme)})
    return SymmetricSearch(scheme=scheme, trace=tuple(trace), selected=selected)


@dataclasses.dataclass(frozen=True)
class AsymmetricStep:
    side: typing.Literal["left", "right"]
    report: BalanceReport

    @property
    def interval(self) -> Interval:
        return self.report.interval


@dataclasses.dataclass(frozen=True)
class AsymmetricSearch:
    start: Interval
    interval: Interval
    trace: tuple[AsymmetricStep, ...]

    def table(self) -> pd.DataFrame:
        rows = [{"step": index, "side": step.side, **step.report.row()} for index, step in enumerate(self.trace, 1)]
        return pd.DataFrame(rows)


def search_asymmetric(
    dataset: Dataset,
    e_hat: np.ndarray,
    scheme: WeightScheme,
    start: Interval,
    settings: SearchSettings = SearchSettings(),
) -> AsymmetricSearch:
    """
    Grow a balanced interval one side at a time.

    Each iteration tries moving e_min down and e_max up by one step and keeps the balanced
    extension with the smaller max |SB|; an exact tie extends the control side (left).
    Stops when neither extension is balanced or both bounds are reached.
    """
    current = start
    trace: list[AsymmetricStep] = []
    step = settings.asymmetric_step
    floor = min(settings.floor, start.e_min)
    ceiling = max(settings.ceiling, start.e_max)

    while True:
        candidates: list[tuple[typing.Literal["left", "right"], Interval]] = []
        if current.e_min > floor:
            candidates.append(("left", Interval(max(floor, round(current.e_min - step, DECIMALS)), current.e_max)))
        if current.e_max < ceiling:
            candidates.append(("right", Interval(current.e_min, min(ceiling, round(current.e_max + step, DECIMALS)))))

        balanced = []
        for side, interval in candidates:
            report = balance_table(dataset, e_hat, interval, scheme, settings.critical)
            if report.balanced:
                balanced.append(AsymmetricStep(side=side, report=report))

        if not balanced:
            break

        # min() keeps the first of equal keys, and "left" is always tried first.
        chosen = min(balanced, key=lambda candidate: candidate.report.max_abs_sb)
        logger.debug("Extended %(side)s to %(interval)s", {"side": chosen.side, "interval": str(chosen.interval)})
        trace.append(chosen)
        current = chosen.interval

    return AsymmetricSearch(start=start, interval=current, trace=tuple(trace))

