"""
The estimation pipeline: probit fit, propensity, interval, augmented estimate and
sandwich standard error. Shared by the batch commands and the simulation studies.
"""

import dataclasses
import logging
import typing

import numpy as np

from ordinalrd.balance import Interval, SearchSettings, WeightScheme, compute_weights, search_asymmetric, search_symmetric
from ordinalrd.dataset import Dataset
from ordinalrd.errors import BalanceError, EstimationError
from ordinalrd.estimate import EffectEstimate, fit_outcome_model, hajek_wate, p_value
from ordinalrd.probit import FittedProbit, OptimizerSettings, PropensityVector, fit
from ordinalrd.variance import InfluenceDecomposition, decompose

logger = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True)
class PipelineSettings:
    probit_terms: tuple[str, ...] | None = None
    outcome_terms: tuple[str, ...] = ()
    optimizer: OptimizerSettings = OptimizerSettings()
    search: SearchSettings = SearchSettings()
    # A fixed interval skips the balance search.
    interval: Interval | None = None
    level: float = 0.95


@dataclasses.dataclass(frozen=True)
class PipelineResult:
    fit: FittedProbit
    propensity: PropensityVector
    estimate: EffectEstimate
    decomposition: InfluenceDecomposition


def select_interval(
    dataset: Dataset,
    e_hat: np.ndarray,
    scheme: WeightScheme,
    settings: SearchSettings,
) -> Interval:
    symmetric = search_symmetric(dataset, e_hat, scheme, settings)
    if symmetric.interval is None:
        raise BalanceError(f"No balanced symmetric interval for {scheme} weights.")
    return search_asymmetric(dataset, e_hat, scheme, symmetric.interval, settings).interval


def estimate_effect(
    estimand: WeightScheme,
    dataset: Dataset,
    propensity: PropensityVector,
    fitted: FittedProbit,
    interval: Interval,
    outcome_terms: typing.Sequence[str],
    level: float = 0.95,
) -> tuple[EffectEstimate, InfluenceDecomposition]:
    """Augmented estimate and sandwich error on the units of ``dataset`` inside ``interval``."""
    inside = interval.contains(propensity.e_hat)
    subsample = dataset.subset(inside)
    sub_propensity = propensity.subset(inside)

    mu0 = fit_outcome_model(subsample, 0, outcome_terms)
    mu1 = fit_outcome_model(subsample, 1, outcome_terms) if estimand is WeightScheme.ATO else None
    decomposition = decompose(estimand, subsample, sub_propensity, fitted, mu0, mu1)

    weights = compute_weights(sub_propensity.e_hat, subsample.treatment, estimand, ids=subsample.ids)
    se = decomposition.se
    if not se > 0:
        raise EstimationError(f"Sandwich standard error for {estimand} is zero.")

    estimate = EffectEstimate(
        estimand=estimand,
        tau=decomposition.tau,
        se=se,
        p_value=p_value(decomposition.tau, se),
        interval=interval,
        n0=int((subsample.treatment == 0).sum()),
        n1=int((subsample.treatment == 1).sum()),
        theta_hat=decomposition.theta_hat,
        hajek=hajek_wate(subsample.outcome, subsample.treatment, weights),
        level=level,
    )
    return estimate, decomposition


def run_pipeline(dataset: Dataset, estimand: WeightScheme, settings: PipelineSettings) -> PipelineResult:
    fitted = fit(dataset, settings.optimizer, settings.probit_terms)
    propensity = fitted.propensity(dataset)
    interval = settings.interval or select_interval(dataset, propensity.e_hat, estimand, settings.search)
    estimate, decomposition = estimate_effect(
        estimand, dataset, propensity, fitted, interval, settings.outcome_terms, settings.level
    )
    return PipelineResult(fit=fitted, propensity=propensity, estimate=estimate, decomposition=decomposition)
