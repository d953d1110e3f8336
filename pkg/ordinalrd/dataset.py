"""
Unit-level data for an ordinal regression discontinuity design.

Rows are read from delimited text, validated against a declared category scale and
indexed by the treatment the scale implies: a unit is treated exactly when its category
is at or above the threshold category.
"""

import dataclasses
import logging
import operator
import os
import typing

import numpy as np
import pandas as pd

from ordinalrd.errors import DataError, ManifestError, UnknownCategoryError

logger = logging.getLogger(__name__)

COMPARATORS: dict[str, typing.Callable[[typing.Any, typing.Any], typing.Any]] = {
    ">": operator.gt,
    ">=": operator.ge,
    "<": operator.lt,
    "<=": operator.le,
    "==": operator.eq,
    "!=": operator.ne,
}


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, copy=True)
    array.setflags(write=False)
    return array


@dataclasses.dataclass(frozen=True)
class CategoryScale:
    """Ordered category labels r_1 < ... < r_J and the 1-based threshold index t."""

    labels: tuple[str, ...]
    threshold_index: int

    def __post_init__(self) -> None:
        if len(self.labels) < 2:
            raise ManifestError("A category scale needs at least two labels.")

        if len(set(self.labels)) != len(self.labels):
            raise ManifestError(f"Category labels must be unique: {list(self.labels)!r}.")

        if not 2 <= self.threshold_index <= len(self.labels):
            raise ManifestError(
                f"Threshold index {self.threshold_index} must lie in 2..{len(self.labels)} "
                "so that both treatment arms contain at least one category."
            )

    @classmethod
    def from_labels(cls, labels: typing.Sequence[str], threshold: str) -> "CategoryScale":
        labels = tuple(str(label) for label in labels)
        if threshold not in labels:
            raise ManifestError(f"Threshold label {threshold!r} is not one of the scale labels {list(labels)!r}.")
        return cls(labels=labels, threshold_index=labels.index(threshold) + 1)

    @property
    def J(self) -> int:
        return len(self.labels)

    @property
    def threshold_label(self) -> str:
        return self.labels[self.threshold_index - 1]

    def index(self, label: str) -> int:
        """1-based index of a label; matching is exact."""
        return self.labels.index(label) + 1


@dataclasses.dataclass(frozen=True)
class UnitRecord:
    id: str
    category: int
    outcome: float
    covariates: tuple[float, ...]


@dataclasses.dataclass(frozen=True)
class DroppedRow:
    row: int
    id: str
    reason: str

    def __str__(self) -> str:
        return f"{self.id}\t{self.reason}"


@dataclasses.dataclass(frozen=True)
class TableSpec:
    """Where the columns of a study live in a delimited file."""

    outcome: str
    category: str
    covariates: tuple[str, ...]
    scale: CategoryScale
    id: str | None = None
    delimiter: str = ","
    strict: bool = False


@dataclasses.dataclass(frozen=True, eq=False)
class Dataset:
    scale: CategoryScale
    ids: np.ndarray
    category: np.ndarray
    outcome: np.ndarray
    covariates: np.ndarray
    covariate_names: tuple[str, ...]
    drops: tuple[DroppedRow, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "ids", _frozen(np.asarray(self.ids, dtype=object)))
        object.__setattr__(self, "category", _frozen(np.asarray(self.category, dtype=int)))
        object.__setattr__(self, "outcome", _frozen(np.asarray(self.outcome, dtype=float)))
        covariates = np.asarray(self.covariates, dtype=float).reshape(len(self.ids), len(self.covariate_names))
        object.__setattr__(self, "covariates", _frozen(covariates))

        n = len(self.ids)
        if n == 0:
            raise DataError("No units survived validation.")

        if not (len(self.category) == len(self.outcome) == n):
            raise DataError("Unit arrays have inconsistent lengths.")

        if np.any((self.category < 1) | (self.category > self.scale.J)):
            raise DataError(f"Category indices must lie in 1..{self.scale.J}.")

        if np.isnan(self.covariates).any() or np.isnan(self.outcome).any():
            raise DataError("Units with missing values must be dropped before building a dataset.")

        treated = int(self.treatment.sum())
        if treated == 0 or treated == n:
            raise DataError(
                f"Need units on both sides of the threshold {self.scale.threshold_label!r}; "
                f"found {treated} treated and {n - treated} control units."
            )

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def p(self) -> int:
        return len(self.covariate_names)

    @property
    def treatment(self) -> np.ndarray:
        return (self.category >= self.scale.threshold_index).astype(int)

    @property
    def units(self) -> list[UnitRecord]:
        return [
            UnitRecord(id=str(i), category=int(c), outcome=float(y), covariates=tuple(float(v) for v in x))
            for i, c, y, x in zip(self.ids, self.category, self.outcome, self.covariates)
        ]

    def frame(self) -> pd.DataFrame:
        """Covariates as a data frame, one column per declared covariate."""
        return pd.DataFrame(self.covariates, columns=list(self.covariate_names))

    def category_counts(self) -> np.ndarray:
        return np.bincount(self.category, minlength=self.scale.J + 1)[1:]

    def subset(self, mask: np.ndarray) -> "Dataset":
        return self.take(np.flatnonzero(mask))

    def take(self, indices: np.ndarray) -> "Dataset":
        return dataclasses.replace(
            self,
            ids=self.ids[indices],
            category=self.category[indices],
            outcome=self.outcome[indices],
            covariates=self.covariates[indices],
        )

    def with_covariates(self, covariates: np.ndarray) -> "Dataset":
        return dataclasses.replace(self, covariates=covariates)


def _parse_float(value: str) -> float | None:
    try:
        parsed = float(value)
    except (TypeError, ValueError):
        return None
    return parsed if np.isfinite(parsed) else None


def load_dataset(source: str | os.PathLike | typing.TextIO, spec: TableSpec) -> Dataset:
    """
    Read a delimited table and validate every row against the spec.

    Rows with a missing or unparseable required field are dropped and recorded in the
    drop log, or rejected outright in strict mode. A category label that is present but
    not on the scale is always an error.
    """
    try:
        table = pd.read_csv(source, sep=spec.delimiter, dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.EmptyDataError as e:
        raise DataError(f"Data table is empty: {e}") from e
    except pd.errors.ParserError as e:
        raise DataError(f"Could not parse data table: {e}") from e

    required = [spec.outcome, spec.category, *spec.covariates] + ([spec.id] if spec.id else [])
    if missing := [column for column in required if column not in table.columns]:
        raise ManifestError(f"Columns declared in the manifest are missing from the data header: {missing!r}.")

    ids: list[str] = []
    categories: list[int] = []
    outcomes: list[float] = []
    covariates: list[list[float]] = []
    drops: list[DroppedRow] = []

    for row, record in enumerate(table.to_dict(orient="records"), start=1):
        unit_id = str(record[spec.id]).strip() if spec.id else f"row{row}"
        reason = None

        label = str(record[spec.category]).strip()
        if not label:
            reason = f"missing-{spec.category}"
        elif label not in spec.scale.labels:
            raise UnknownCategoryError(
                f"Row {row} ({unit_id}) has category {label!r}, which is not on the scale {list(spec.scale.labels)!r}."
            )

        values = {}
        for column in (spec.outcome, *spec.covariates):
            if reason is not None:
                break
            text = str(record[column]).strip()
            if not text:
                reason = f"missing-{column}"
            elif (value := _parse_float(text)) is None:
                reason = f"unparseable-{column}"
            else:
                values[column] = value

        if reason is not None:
            drops.append(DroppedRow(row=row, id=unit_id, reason=reason))
            continue

        ids.append(unit_id)
        categories.append(spec.scale.index(label))
        outcomes.append(values[spec.outcome])
        covariates.append([values[column] for column in spec.covariates])

    if drops:
        logger.warning("Dropped %(n)d incomplete rows", {"n": len(drops)})
        for drop in drops:
            logger.info("Dropped row %(row)d (%(id)s): %(reason)s", {"row": drop.row, "id": drop.id, "reason": drop.reason})
        if spec.strict:
            first = drops[0]
            raise DataError(
                f"Strict mode: {len(drops)} rows failed validation, first is row {first.row} ({first.id}): {first.reason}."
            )

    if not ids:
        raise DataError("No rows survived validation.")

    return Dataset(
        scale=spec.scale,
        ids=np.array(ids, dtype=object),
        category=np.array(categories),
        outcome=np.array(outcomes),
        covariates=np.array(covariates, dtype=float).reshape(len(ids), len(spec.covariates)),
        covariate_names=tuple(spec.covariates),
        drops=tuple(drops),
    )


@dataclasses.dataclass(frozen=True)
class ExclusionRule:
    """Units for which ``covariate <comparator> bound`` holds are excluded."""

    covariate: str
    comparator: str
    bound: float

    def __post_init__(self) -> None:
        if self.comparator not in COMPARATORS:
            raise ManifestError(f"Unknown comparator {self.comparator!r}, expected one of {list(COMPARATORS)!r}.")

    def __str__(self) -> str:
        return f"{self.covariate} {self.comparator} {self.bound:g}"

    def violations(self, dataset: Dataset) -> np.ndarray:
        if self.covariate not in dataset.covariate_names:
            raise ManifestError(f"Exclusion rule '{self}' names an undeclared covariate {self.covariate!r}.")
        column = dataset.covariates[:, dataset.covariate_names.index(self.covariate)]
        return np.asarray(COMPARATORS[self.comparator](column, self.bound), dtype=bool)


def apply_exclusion_rules(
    dataset: Dataset,
    rules: typing.Sequence[ExclusionRule],
) -> tuple[Dataset, list[tuple[ExclusionRule, int]]]:
    """Remove units violating any rule; counts are per rule, so a unit can count twice."""
    excluded = np.zeros(dataset.n, dtype=bool)
    counts = []
    for rule in rules:
        violations = rule.violations(dataset)
        counts.append((rule, int(violations.sum())))
        excluded |= violations
        logger.info("Rule %(rule)s excludes %(n)d units", {"rule": str(rule), "n": int(violations.sum())})

    if not excluded.any():
        return dataset, counts

    return dataset.subset(~excluded), counts


@dataclasses.dataclass(frozen=True)
class Summary:
    covariates: pd.DataFrame
    categories: pd.DataFrame
    outcomes: pd.DataFrame

    @property
    def n(self) -> int:
        return int(self.categories["n"].sum())


def summarize(dataset: Dataset) -> Summary:
    frame = dataset.frame()
    described = pd.DataFrame(
        {
            "n": frame.count(),
            "mean": frame.mean(),
            "sd": frame.std(ddof=1),
            "min": frame.min(),
            "q1": frame.quantile(0.25),
            "median": frame.quantile(0.5),
            "q3": frame.quantile(0.75),
            "max": frame.max(),
        }
    )
    described.index.name = "covariate"

    counts = dataset.category_counts()
    categories = pd.DataFrame(
        {
            "category": list(dataset.scale.labels),
            "n": counts,
            "treated": [int(j >= dataset.scale.threshold_index) for j in range(1, dataset.scale.J + 1)],
        }
    )
    return Summary(covariates=described, categories=categories, outcomes=outcome_by_category(dataset))


def outcome_by_category(dataset: Dataset) -> pd.DataFrame:
    """Distribution of the outcome within each category, empty categories included."""
    labels = np.asarray(dataset.scale.labels, dtype=object)[dataset.category - 1]
    grouped = pd.Series(dataset.outcome, dtype=float).groupby(labels)
    table = pd.DataFrame(
        {
            "n": grouped.count(),
            "min": grouped.min(),
            "q1": grouped.quantile(0.25),
            "median": grouped.quantile(0.5),
            "q3": grouped.quantile(0.75),
            "max": grouped.max(),
            "mean": grouped.mean(),
        }
    ).reindex(list(dataset.scale.labels))
    table["n"] = table["n"].fillna(0).astype(int)
    table.index.name = "category"
    return table.reset_index()


def collapse_empty_categories(dataset: Dataset) -> Dataset:
    """
    Remove categories with no units from the scale.

    The threshold moves to the first non-empty category at or above it, so every
    unit keeps its treatment indicator.
    """
    counts = dataset.category_counts()
    keep = [j for j in range(1, dataset.scale.J + 1) if counts[j - 1] > 0]
    if len(keep) == dataset.scale.J:
        return dataset

    removed = [dataset.scale.labels[j - 1] for j in range(1, dataset.scale.J + 1) if counts[j - 1] == 0]
    logger.warning("Collapsing empty categories %(removed)s", {"removed": removed})

    threshold = next(j for j in keep if j >= dataset.scale.threshold_index)
    scale = CategoryScale(
        labels=tuple(dataset.scale.labels[j - 1] for j in keep),
        threshold_index=keep.index(threshold) + 1,
    )
    remap = np.zeros(dataset.scale.J + 1, dtype=int)
    remap[keep] = np.arange(1, len(keep) + 1)
    return dataclasses.replace(dataset, scale=scale, category=remap[dataset.category])


@dataclasses.dataclass(frozen=True)
class Standardization:
    means: np.ndarray
    sds: np.ndarray


def standardize(dataset: Dataset) -> tuple[Dataset, Standardization]:
    """Z-score each covariate; constant covariates are centred only."""
    means = dataset.covariates.mean(axis=0)
    sds = dataset.covariates.std(axis=0, ddof=1) if dataset.n > 1 else np.ones(dataset.p)
    sds = np.where(sds > 0, sds, 1.0)
    return dataset.with_covariates((dataset.covariates - means) / sds), Standardization(means=means, sds=sds)
