"""
Sandwich standard errors for the augmented ATT and ATO estimators.

Both estimators are differences tau1 - tau0 of solutions to estimating equations
sum_i U_i = 0 whose terms also depend on the probit parameters eta and the outcome
coefficients gamma. Linearising gives per-unit influence values

    I_i = U1_i - U0_i - H_eta' E_eta^-1 S_i(eta) - sum_z H_gz' E_gz^-1 S_i(gamma_z)

where every H is minus the subsample mean of the gradient of U1 - U0, the E are
per-observation information matrices and the S are per-observation scores. The
variance is sum_i I_i^2 / (n theta)^2.

The probit is fitted on the full sample: E_eta is its information averaged over all N
units, while the scores entering I_i are those of the subsample units.
"""

import dataclasses
import logging
import typing

import numpy as np
import pandas as pd
import scipy.linalg

from ordinalrd.balance import WeightScheme
from ordinalrd.dataset import Dataset
from ordinalrd.errors import EstimationError, SingularInformationError
from ordinalrd.estimate import OutcomeModel, augmented_ato_parts, augmented_att_parts
from ordinalrd.probit import FittedProbit, PropensityVector

logger = logging.getLogger(__name__)

CONDITION_LIMIT = 1e12


def spd_inverse(matrix: np.ndarray, label: str) -> np.ndarray:
    """Invert a symmetric positive definite matrix, refusing ill-conditioned ones."""
    if matrix.size == 0:
        return matrix.copy()
    condition = float(np.linalg.cond(matrix))
    if not np.isfinite(condition) or condition > CONDITION_LIMIT:
        raise SingularInformationError(f"Information matrix for {label} is singular (condition number {condition:.3g}).")
    try:
        factor = scipy.linalg.cho_factor(matrix)
    except scipy.linalg.LinAlgError as e:
        raise SingularInformationError(
            f"Information matrix for {label} is not positive definite (condition number {condition:.3g})."
        ) from e
    return scipy.linalg.cho_solve(factor, np.eye(len(matrix)))


@dataclasses.dataclass(frozen=True, eq=False)
class InfluenceDecomposition:
    estimand: WeightScheme
    ids: np.ndarray
    u1: np.ndarray
    u0: np.ndarray
    influence: np.ndarray
    tau1: float
    tau0: float
    theta_hat: float
    h_eta: np.ndarray
    h_gamma0: np.ndarray
    h_gamma1: np.ndarray | None
    info_inv_eta: np.ndarray
    info_inv_gamma0: np.ndarray
    info_inv_gamma1: np.ndarray | None

    @property
    def n(self) -> int:
        return len(self.influence)

    @property
    def tau(self) -> float:
        return self.tau1 - self.tau0

    @property
    def variance(self) -> float:
        return float(np.sum(self.influence**2) / (self.n * self.theta_hat) ** 2)

    @property
    def se(self) -> float:
        return float(np.sqrt(self.variance))

    @property
    def naive_se(self) -> float:
        """The standard error when the nuisance estimates are treated as known."""
        return float(np.sqrt(np.sum((self.u1 - self.u0) ** 2)) / (self.n * self.theta_hat))


def estimating_functions(
    estimand: WeightScheme,
    y: np.ndarray,
    treatment: np.ndarray,
    e_hat: np.ndarray,
    mu0: np.ndarray,
    mu1: np.ndarray | None,
    tau1: float,
    tau0: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-unit U_i(tau1, ...) and U_i(tau0, ...); each sums to zero at the estimates."""
    z = np.asarray(treatment, dtype=float)
    e = e_hat
    if estimand is WeightScheme.ATT:
        u1 = z * (y - tau1)
        u0 = (y * (1 - z) * e + mu0 * (z - e)) / (1 - e) - tau0 * z
        return u1, u0

    if estimand is WeightScheme.ATO:
        assert mu1 is not None
        u1 = (1 - e) * (z * y - (z - e) * mu1 - e * tau1)
        u0 = e * ((1 - z) * y + (z - e) * mu0 - (1 - e) * tau0)
        return u1, u0

    raise EstimationError(f"No augmented estimator for {estimand} weights.")


def _gradients(
    estimand: WeightScheme,
    y: np.ndarray,
    treatment: np.ndarray,
    propensity: PropensityVector,
    mu0: OutcomeModel,
    mu1: OutcomeModel | None,
    tau1: float,
    tau0: float,
) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Per-unit gradients of U1 - U0 in eta, gamma0 and gamma1."""
    z = np.asarray(treatment, dtype=float)
    e, e_eta = propensity.e_hat, propensity.gradient

    if estimand is WeightScheme.ATT:
        d_eta = -((y - mu0.fitted) * (1 - z) / (1 - e) ** 2)[:, None] * e_eta
        d_gamma0 = -((z - e) / (1 - e))[:, None] * mu0.design
        return d_eta, d_gamma0, None

    assert mu1 is not None
    d_u1 = z * (mu1.fitted - y) + mu1.fitted * (1 - 2 * e) + tau1 * (2 * e - 1)
    d_u0 = (1 - z) * y + mu0.fitted * (z - 2 * e) - tau0 * (1 - 2 * e)
    d_eta = (d_u1 - d_u0)[:, None] * e_eta
    d_gamma1 = ((e - 1) * (z - e))[:, None] * mu1.design
    d_gamma0 = -(e * (z - e))[:, None] * mu0.design
    return d_eta, d_gamma0, d_gamma1


def decompose(
    estimand: WeightScheme,
    subsample: Dataset,
    propensity: PropensityVector,
    fit: FittedProbit,
    mu0: OutcomeModel,
    mu1: OutcomeModel | None = None,
) -> InfluenceDecomposition:
    y, z = subsample.outcome, subsample.treatment
    e = propensity.e_hat

    if estimand is WeightScheme.ATT:
        tau1, tau0 = augmented_att_parts(y, z, e, mu0.fitted)
        theta = float(np.mean(e))
    elif estimand is WeightScheme.ATO:
        if mu1 is None:
            raise EstimationError("The augmented ATO needs an outcome model for the treated arm.")
        tau1, tau0 = augmented_ato_parts(y, z, e, mu0.fitted, mu1.fitted)
        theta = float(np.mean(e * (1 - e)))
    else:
        raise EstimationError(f"No sandwich variance for {estimand} weights.")

    u1, u0 = estimating_functions(estimand, y, z, e, mu0.fitted, None if mu1 is None else mu1.fitted, tau1, tau0)
    d_eta, d_gamma0, d_gamma1 = _gradients(estimand, y, z, propensity, mu0, mu1, tau1, tau0)

    h_eta = -d_eta.mean(axis=0)
    h_gamma0 = -d_gamma0.mean(axis=0)
    info_inv_eta = spd_inverse(fit.average_information, "the ordered probit")
    info_inv_gamma0 = spd_inverse(mu0.information, "the control outcome model")

    influence = (
        (u1 - u0)
        - fit.scores_for(subsample) @ (info_inv_eta @ h_eta)
        - mu0.per_obs_scores @ (info_inv_gamma0 @ h_gamma0)
    )

    h_gamma1 = info_inv_gamma1 = None
    if d_gamma1 is not None and mu1 is not None:
        h_gamma1 = -d_gamma1.mean(axis=0)
        info_inv_gamma1 = spd_inverse(mu1.information, "the treated outcome model")
        influence = influence - mu1.per_obs_scores @ (info_inv_gamma1 @ h_gamma1)

    if not np.all(np.isfinite(influence)):
        raise EstimationError("Influence values are not finite.")

    logger.info(
        "%(estimand)s: tau=%(tau).6g theta=%(theta).4g over %(n)d units",
        {"estimand": str(estimand), "tau": tau1 - tau0, "theta": theta, "n": subsample.n},
    )

    return InfluenceDecomposition(
        estimand=estimand,
        ids=subsample.ids,
        u1=u1,
        u0=u0,
        influence=influence,
        tau1=tau1,
        tau0=tau0,
        theta_hat=theta,
        h_eta=h_eta,
        h_gamma0=h_gamma0,
        h_gamma1=h_gamma1,
        info_inv_eta=info_inv_eta,
        info_inv_gamma0=info_inv_gamma0,
        info_inv_gamma1=info_inv_gamma1,
    )


def sandwich_att(
    subsample: Dataset,
    propensity: PropensityVector,
    fit: FittedProbit,
    mu0: OutcomeModel,
) -> InfluenceDecomposition:
    return decompose(WeightScheme.ATT, subsample, propensity, fit, mu0)


def sandwich_ato(
    subsample: Dataset,
    propensity: PropensityVector,
    fit: FittedProbit,
    mu0: OutcomeModel,
    mu1: OutcomeModel,
) -> InfluenceDecomposition:
    return decompose(WeightScheme.ATO, subsample, propensity, fit, mu0, mu1)


def influence_diagnostics(decomposition: InfluenceDecomposition, factor: float = 5.0) -> pd.DataFrame:
    """Per-unit influence, flagging units beyond ``factor`` times the median absolute influence."""
    magnitude = np.abs(decomposition.influence)
    cutoff = factor * float(np.median(magnitude))
    return pd.DataFrame(
        {
            "id": decomposition.ids,
            "influence": decomposition.influence,
            "abs_influence": magnitude,
            "flagged": magnitude > cutoff,
        }
    )


def dump_decomposition(decomposition: InfluenceDecomposition, head: int = 10) -> dict[str, typing.Any]:
    def vector(values: np.ndarray | None) -> list[float] | None:
        return None if values is None else [float(v) for v in values]

    return {
        "estimand": str(decomposition.estimand),
        "n": decomposition.n,
        "tau1": decomposition.tau1,
        "tau0": decomposition.tau0,
        "theta_hat": decomposition.theta_hat,
        "se": decomposition.se,
        "naive_se": decomposition.naive_se,
        "h_eta": vector(decomposition.h_eta),
        "h_gamma0": vector(decomposition.h_gamma0),
        "h_gamma1": vector(decomposition.h_gamma1),
        "influence_head": vector(decomposition.influence[:head]),
    }
