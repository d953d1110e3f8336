"""
Treatment effect estimators on a selected subsample.

Positive effects mean treated outcomes exceed control outcomes.
"""

import dataclasses
import logging
import typing

import numpy as np
import scipy.linalg
import scipy.stats

from ordinalrd.balance import Interval, WeightScheme
from ordinalrd.dataset import Dataset
from ordinalrd.errors import EstimationError
from ordinalrd.ext.patsy import design_matrix

logger = logging.getLogger(__name__)


def hajek_wate(y: np.ndarray, treatment: np.ndarray, weights: np.ndarray) -> float:
    """Difference of the arm-wise weighted mean outcomes."""
    y, weights = np.asarray(y, dtype=float), np.asarray(weights, dtype=float)
    treated = np.asarray(treatment) == 1
    total1, total0 = weights[treated].sum(), weights[~treated].sum()
    if total1 <= 0 or total0 <= 0:
        raise EstimationError(f"Both arms need positive total weight, got {total1:g} treated and {total0:g} control.")
    return float(np.sum(weights[treated] * y[treated]) / total1 - np.sum(weights[~treated] * y[~treated]) / total0)


@dataclasses.dataclass(frozen=True, eq=False)
class OutcomeModel:
    """
    Least-squares regression of the outcome on the terms, fitted on one arm.

    ``design`` and ``fitted`` cover every unit of the subsample the model was fitted
    in, so predictions for the other arm are available. Scores are zero outside the arm
    and ``information`` is the arm's cross-product averaged over the whole subsample.
    """

    arm: int
    terms: tuple[str, ...]
    term_names: tuple[str, ...]
    coefficients: np.ndarray
    design: np.ndarray
    fitted: np.ndarray
    per_obs_scores: np.ndarray
    information: np.ndarray

    @property
    def n(self) -> int:
        return len(self.fitted)

    def predict(self, dataset: Dataset) -> np.ndarray:
        return design_matrix(self.terms, dataset.frame(), intercept=True).matrix @ self.coefficients


def _collinear_terms(matrix: np.ndarray, names: typing.Sequence[str]) -> list[str]:
    _, r, pivots = scipy.linalg.qr(matrix, mode="economic", pivoting=True)
    diagonal = np.abs(np.diag(r))
    tolerance = diagonal.max() * max(matrix.shape) * np.finfo(float).eps if len(diagonal) else 0.0
    rank = int(np.sum(diagonal > tolerance))
    return [names[k] for k in pivots[rank:]]


def fit_outcome_model(subsample: Dataset, arm: int, terms: typing.Sequence[str]) -> OutcomeModel:
    terms = tuple(terms)
    design = design_matrix(terms, subsample.frame(), intercept=True)
    in_arm = subsample.treatment == arm
    x, y = design.matrix[in_arm], subsample.outcome[in_arm]

    if len(y) <= x.shape[1]:
        raise EstimationError(
            f"Outcome model for arm {arm} needs more units ({len(y)}) than coefficients ({x.shape[1]})."
        )

    if collinear := _collinear_terms(x, design.names):
        raise EstimationError(f"Outcome model for arm {arm} is rank deficient; collinear terms: {collinear!r}.")

    coefficients, *_ = np.linalg.lstsq(x, y, rcond=None)
    fitted = design.matrix @ coefficients
    residuals = np.where(in_arm, subsample.outcome - fitted, 0.0)

    return OutcomeModel(
        arm=arm,
        terms=terms,
        term_names=design.names,
        coefficients=coefficients,
        design=design.matrix,
        fitted=fitted,
        per_obs_scores=design.matrix * residuals[:, None],
        information=(x.T @ x) / subsample.n,
    )


def _check_arms(treatment: np.ndarray) -> None:
    treated = int(np.sum(treatment))
    if treated == 0 or treated == len(treatment):
        raise EstimationError(f"Subsample has a single arm ({treated} treated of {len(treatment)}).")


def augmented_att_parts(y: np.ndarray, treatment: np.ndarray, e_hat: np.ndarray, mu0: np.ndarray) -> tuple[float, float]:
    """(tau1, tau0): the treated mean and the augmented estimate of the treated's mean control outcome."""
    z = np.asarray(treatment, dtype=float)
    if z.sum() == 0:
        raise EstimationError("Augmented ATT needs at least one treated unit.")
    tau1 = np.sum(y * z) / z.sum()
    tau0 = np.sum((y * (1 - z) * e_hat + mu0 * (z - e_hat)) / (1 - e_hat)) / z.sum()
    return float(tau1), float(tau0)


def augmented_att(y: np.ndarray, treatment: np.ndarray, e_hat: np.ndarray, mu0: np.ndarray) -> float:
    tau1, tau0 = augmented_att_parts(y, treatment, e_hat, mu0)
    return tau1 - tau0


def augmented_ato_parts(
    y: np.ndarray,
    treatment: np.ndarray,
    e_hat: np.ndarray,
    mu0: np.ndarray,
    mu1: np.ndarray,
) -> tuple[float, float]:
    z = np.asarray(treatment, dtype=float)
    _check_arms(z)
    tilt = np.sum(e_hat * (1 - e_hat))
    if tilt <= 0:
        raise EstimationError("Overlap weights sum to zero.")
    tau1 = np.sum((1 - e_hat) * (z * y - (z - e_hat) * mu1)) / tilt
    tau0 = np.sum(e_hat * ((1 - z) * y + (z - e_hat) * mu0)) / tilt
    return float(tau1), float(tau0)


def augmented_ato(y: np.ndarray, treatment: np.ndarray, e_hat: np.ndarray, mu0: np.ndarray, mu1: np.ndarray) -> float:
    tau1, tau0 = augmented_ato_parts(y, treatment, e_hat, mu0, mu1)
    return tau1 - tau0


def p_value(tau: float, se: float) -> float:
    """Two-sided p-value against the standard normal."""
    if not se > 0:
        raise EstimationError(f"Standard error must be positive to compute a p-value, got {se!r}.")
    return float(2.0 * scipy.stats.norm.sf(abs(tau) / se))


def confidence_interval(tau: float, se: float, level: float = 0.95) -> tuple[float, float]:
    z = float(scipy.stats.norm.ppf(0.5 + level / 2.0))
    return tau - z * se, tau + z * se


@dataclasses.dataclass(frozen=True)
class EffectEstimate:
    estimand: WeightScheme
    tau: float
    se: float
    p_value: float
    interval: Interval
    n0: int
    n1: int
    theta_hat: float
    hajek: float
    level: float = 0.95

    def confidence_interval(self) -> tuple[float, float]:
        return confidence_interval(self.tau, self.se, self.level)

    def row(self) -> dict[str, typing.Any]:
        lower, upper = self.confidence_interval()
        return {
            "estimand": str(self.estimand),
            "e_min": self.interval.e_min,
            "e_max": self.interval.e_max,
            "n0": self.n0,
            "n1": self.n1,
            "estimate": self.tau,
            "se": self.se,
            "p_value": self.p_value,
            "level": self.level,
            "ci_lower": lower,
            "ci_upper": upper,
            "hajek": self.hajek,
        }
