"""
Ordered probit model for the ordinal running variable.

A unit falls in category r_j when the latent index x'beta + e, e ~ N(0, 1), lies in
(u_{j-1}, u_j]. Parameters are ordered eta = (u_1, ..., u_{J-1}, beta); there is no
intercept, the cutoffs absorb location.

The optimizer works on unconstrained coordinates (u_1, log(u_2 - u_1), ...) so every
iterate has strictly increasing cutoffs; scores and information are reported in eta.
"""

import dataclasses
import logging
import pathlib
import typing

import numpy as np
import pandas as pd
import scipy.linalg
import scipy.special
import scipy.stats
import yaml

from ordinalrd.dataset import CategoryScale, Dataset, Standardization, collapse_empty_categories
from ordinalrd.errors import CellUnderflowError, FitError, SeparationError
from ordinalrd.ext.patsy import design_matrix

logger = logging.getLogger(__name__)

PROBABILITY_FLOOR = 1e-12
PROPENSITY_CLAMP = 1e-10

ndtr = scipy.special.ndtr
npdf = scipy.stats.norm.pdf


@dataclasses.dataclass(frozen=True)
class OptimizerSettings:
    tolerance: float = 1e-8
    max_iterations: int = 200
    max_halvings: int = 30
    empty_category: typing.Literal["error", "collapse"] = "error"
    # Any |eta| beyond this is treated as a diverging coefficient.
    divergence_bound: float = 1e3


@dataclasses.dataclass(frozen=True, eq=False)
class ProbitParams:
    beta: np.ndarray
    cutoffs: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=float).reshape(-1))
        object.__setattr__(self, "cutoffs", np.asarray(self.cutoffs, dtype=float).reshape(-1))
        if len(self.cutoffs) < 1:
            raise FitError("An ordered probit needs at least one cutoff.")
        if np.any(np.diff(self.cutoffs) <= 0) or not np.all(np.isfinite(self.cutoffs)):
            raise FitError(f"Cutoffs must be finite and strictly increasing, got {self.cutoffs.tolist()!r}.")

    @property
    def eta(self) -> np.ndarray:
        return np.concatenate([self.cutoffs, self.beta])

    @classmethod
    def from_eta(cls, eta: np.ndarray, n_cutoffs: int) -> "ProbitParams":
        eta = np.asarray(eta, dtype=float)
        return cls(beta=eta[n_cutoffs:], cutoffs=eta[:n_cutoffs])


@dataclasses.dataclass(frozen=True, eq=False)
class ProbitDesign:
    """Term matrix, observed categories and unit ids the likelihood is evaluated on."""

    x: np.ndarray
    category: np.ndarray
    ids: np.ndarray
    scale: CategoryScale
    term_names: tuple[str, ...]

    @classmethod
    def from_dataset(cls, dataset: Dataset, terms: typing.Sequence[str] | None = None) -> "ProbitDesign":
        terms = dataset.covariate_names if terms is None else tuple(terms)
        design = design_matrix(terms, dataset.frame(), intercept=False)
        return cls(
            x=design.matrix,
            category=dataset.category,
            ids=dataset.ids,
            scale=dataset.scale,
            term_names=design.names,
        )

    @property
    def n(self) -> int:
        return len(self.category)

    @property
    def dim(self) -> int:
        return self.scale.J - 1 + self.x.shape[1]


def _check_dimensions(params: ProbitParams, design: ProbitDesign) -> None:
    if len(params.cutoffs) != design.scale.J - 1 or len(params.beta) != design.x.shape[1]:
        raise FitError(
            f"Parameters with {len(params.cutoffs)} cutoffs and {len(params.beta)} coefficients do not match "
            f"a design with {design.scale.J} categories and {design.x.shape[1]} terms."
        )


def _bounds(params: ProbitParams, design: ProbitDesign) -> tuple[np.ndarray, np.ndarray]:
    index = design.x @ params.beta
    upper = np.append(params.cutoffs, np.inf)[design.category - 1] - index
    lower = np.insert(params.cutoffs, 0, -np.inf)[design.category - 1] - index
    return upper, lower


def _cell_probabilities(upper: np.ndarray, lower: np.ndarray) -> np.ndarray:
    # Differencing upper-tail probabilities keeps precision when both bounds are large.
    return np.where(lower > 0, ndtr(-lower) - ndtr(-upper), ndtr(upper) - ndtr(lower))


def _checked_probabilities(params: ProbitParams, design: ProbitDesign) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    _check_dimensions(params, design)
    upper, lower = _bounds(params, design)
    probabilities = _cell_probabilities(upper, lower)
    if np.any(underflow := probabilities < PROBABILITY_FLOOR):
        i = int(np.flatnonzero(underflow)[0])
        raise CellUnderflowError(
            f"Probability of the observed category underflows for unit {design.ids[i]} "
            f"({probabilities[i]:.3g} < {PROBABILITY_FLOOR:g})."
        )
    return upper, lower, probabilities


def log_likelihood(params: ProbitParams, design: ProbitDesign) -> float:
    _, _, probabilities = _checked_probabilities(params, design)
    return float(np.sum(np.log(probabilities)))


def _bound_gradients(design: ProbitDesign) -> tuple[np.ndarray, np.ndarray]:
    """Rows d(upper)/d(eta) and d(lower)/d(eta); entries for infinite bounds are unused."""
    n, k = design.n, design.dim
    n_cutoffs = design.scale.J - 1
    rows = np.arange(n)

    d_upper = np.zeros((n, k))
    d_lower = np.zeros((n, k))
    has_upper = design.category < design.scale.J
    has_lower = design.category > 1
    d_upper[rows[has_upper], design.category[has_upper] - 1] = 1.0
    d_lower[rows[has_lower], design.category[has_lower] - 2] = 1.0
    d_upper[:, n_cutoffs:] = -design.x
    d_lower[:, n_cutoffs:] = -design.x
    return d_upper, d_lower


def _density_terms(upper: np.ndarray, lower: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    phi_upper, phi_lower = npdf(upper), npdf(lower)
    finite_upper, finite_lower = np.isfinite(upper), np.isfinite(lower)
    slope_upper = np.where(finite_upper, upper, 0.0) * phi_upper
    slope_lower = np.where(finite_lower, lower, 0.0) * phi_lower
    return phi_upper, phi_lower, slope_upper, slope_lower


def score(params: ProbitParams, design: ProbitDesign) -> tuple[np.ndarray, np.ndarray]:
    """Total score and the N x dim(eta) matrix of per-observation scores."""
    upper, lower, probabilities = _checked_probabilities(params, design)
    phi_upper, phi_lower, _, _ = _density_terms(upper, lower)
    d_upper, d_lower = _bound_gradients(design)
    per_obs = (phi_upper / probabilities)[:, None] * d_upper - (phi_lower / probabilities)[:, None] * d_lower
    return per_obs.sum(axis=0), per_obs


def hessian(params: ProbitParams, design: ProbitDesign) -> np.ndarray:
    upper, lower, probabilities = _checked_probabilities(params, design)
    phi_upper, phi_lower, slope_upper, slope_lower = _density_terms(upper, lower)
    d_upper, d_lower = _bound_gradients(design)

    per_obs = (phi_upper / probabilities)[:, None] * d_upper - (phi_lower / probabilities)[:, None] * d_lower
    curvature = -(d_upper.T * (slope_upper / probabilities)) @ d_upper + (d_lower.T * (slope_lower / probabilities)) @ d_lower
    matrix = curvature - per_obs.T @ per_obs
    return (matrix + matrix.T) / 2.0


def observed_information(params: ProbitParams, design: ProbitDesign) -> np.ndarray:
    """Negative Hessian of the log-likelihood, exactly symmetric."""
    return -hessian(params, design)


def numerical_information(params: ProbitParams, design: ProbitDesign, step: float = 1e-6) -> np.ndarray:
    """Central differences of the analytic score, for checking the analytic information."""
    eta = params.eta
    n_cutoffs = len(params.cutoffs)
    columns = []
    for k in range(len(eta)):
        shift = np.zeros_like(eta)
        shift[k] = step
        forward, _ = score(ProbitParams.from_eta(eta + shift, n_cutoffs), design)
        backward, _ = score(ProbitParams.from_eta(eta - shift, n_cutoffs), design)
        columns.append((forward - backward) / (2.0 * step))
    matrix = -np.column_stack(columns)
    return (matrix + matrix.T) / 2.0


def _to_free(params: ProbitParams) -> np.ndarray:
    return np.concatenate([params.cutoffs[:1], np.log(np.diff(params.cutoffs)), params.beta])


def _from_free(theta: np.ndarray, n_cutoffs: int) -> ProbitParams:
    cutoffs = theta[0] + np.concatenate([[0.0], np.cumsum(np.exp(theta[1:n_cutoffs]))])
    return ProbitParams(beta=theta[n_cutoffs:], cutoffs=cutoffs)


def _free_jacobian(theta: np.ndarray, n_cutoffs: int) -> np.ndarray:
    """d(eta)/d(theta); cutoff m depends on every log-increment at or before it."""
    jacobian = np.eye(len(theta))
    jacobian[:n_cutoffs, 0] = 1.0
    for k in range(1, n_cutoffs):
        jacobian[k:n_cutoffs, k] = np.exp(theta[k])
    return jacobian


def _free_curvature(theta: np.ndarray, n_cutoffs: int, total_score: np.ndarray) -> np.ndarray:
    """The score-weighted second derivative of eta in theta, which is diagonal."""
    diagonal = np.zeros(len(theta))
    for k in range(1, n_cutoffs):
        diagonal[k] = np.exp(theta[k]) * total_score[k:n_cutoffs].sum()
    return np.diag(diagonal)


def _safe_log_likelihood(params: ProbitParams, design: ProbitDesign) -> float:
    try:
        return log_likelihood(params, design)
    except (CellUnderflowError, FitError):
        return -np.inf


def starting_values(design: ProbitDesign) -> ProbitParams:
    """Beta = 0 and cutoffs at the normal quantiles of cumulative category shares."""
    counts = np.bincount(design.category, minlength=design.scale.J + 1)[1:]
    cumulative = np.cumsum(counts)[:-1] / design.n
    return ProbitParams(beta=np.zeros(design.x.shape[1]), cutoffs=scipy.special.ndtri(cumulative))


@dataclasses.dataclass(frozen=True, eq=False)
class PropensityVector:
    """Clamped propensity scores e(x) = Pr(R >= r_t | x) and their eta-gradients."""

    e_hat: np.ndarray
    gradient: np.ndarray
    ids: np.ndarray

    def __len__(self) -> int:
        return len(self.e_hat)

    def take(self, indices: np.ndarray) -> "PropensityVector":
        return PropensityVector(e_hat=self.e_hat[indices], gradient=self.gradient[indices], ids=self.ids[indices])

    def subset(self, mask: np.ndarray) -> "PropensityVector":
        return self.take(np.flatnonzero(mask))


@dataclasses.dataclass(frozen=True, eq=False)
class FittedProbit:
    params: ProbitParams
    loglik: float
    per_obs_scores: np.ndarray
    information: np.ndarray
    converged: bool
    iterations: int
    scale: CategoryScale
    terms: tuple[str, ...]
    term_names: tuple[str, ...]
    n: int

    @property
    def total_score(self) -> np.ndarray:
        return self.per_obs_scores.sum(axis=0)

    @property
    def average_information(self) -> np.ndarray:
        return self.information / self.n

    def align(self, dataset: Dataset) -> Dataset:
        """Re-index a dataset's categories onto the fitted scale, which may have been collapsed."""
        if dataset.scale == self.scale:
            return dataset
        remap = np.zeros(dataset.scale.J + 1, dtype=int)
        for j, label in enumerate(dataset.scale.labels, start=1):
            remap[j] = self.scale.index(label) if label in self.scale.labels else 0
        category = remap[dataset.category]
        if np.any(category == 0):
            missing = sorted({dataset.scale.labels[j - 1] for j in dataset.category[category == 0]})
            raise FitError(f"Units have categories {missing!r} that the fitted model does not know.")
        return dataclasses.replace(dataset, scale=self.scale, category=category)

    def design(self, dataset: Dataset) -> ProbitDesign:
        design = ProbitDesign.from_dataset(self.align(dataset), self.terms)
        if design.term_names != self.term_names:
            raise FitError(f"Terms {design.term_names!r} do not match the fitted terms {self.term_names!r}.")
        return design

    def scores_for(self, dataset: Dataset) -> np.ndarray:
        """Per-observation scores S_i(eta) at the fitted parameters, for any set of units."""
        _, per_obs = score(self.params, self.design(dataset))
        return per_obs

    def category_probabilities(self, x: np.ndarray) -> np.ndarray:
        """Pr(R = r_j | x) for one term vector x, j = 1..J."""
        index = float(np.asarray(x, dtype=float) @ self.params.beta)
        cumulative = np.concatenate([[0.0], ndtr(self.params.cutoffs - index), [1.0]])
        return np.diff(cumulative)

    def propensity(self, dataset: Dataset) -> PropensityVector:
        design = self.design(dataset)
        return propensity_from_params(self.params, design.x, self.scale.threshold_index, dataset.ids)

    def original_scale(self, standardization: Standardization, covariate_names: typing.Sequence[str]) -> ProbitParams | None:
        """
        Map parameters fitted on z-scored covariates back to the original units.

        Only possible when every term is a bare covariate.
        """
        if not set(self.term_names) <= set(covariate_names):
            return None
        positions = [list(covariate_names).index(name) for name in self.term_names]
        means, sds = standardization.means[positions], standardization.sds[positions]
        beta = self.params.beta / sds
        return ProbitParams(beta=beta, cutoffs=self.params.cutoffs + float(means @ beta))


def propensity_from_params(
    params: ProbitParams,
    x: np.ndarray,
    threshold_index: int,
    ids: np.ndarray | None = None,
) -> PropensityVector:
    cutoff = params.cutoffs[threshold_index - 2]
    margin = x @ params.beta - cutoff
    e_hat = np.clip(ndtr(margin), PROPENSITY_CLAMP, 1.0 - PROPENSITY_CLAMP)

    density = npdf(margin)
    gradient = np.zeros((len(margin), len(params.cutoffs) + len(params.beta)))
    gradient[:, threshold_index - 2] = -density
    gradient[:, len(params.cutoffs) :] = density[:, None] * x
    ids = np.arange(len(margin)).astype(str).astype(object) if ids is None else ids
    return PropensityVector(e_hat=e_hat, gradient=gradient, ids=ids)


def build_fit(
    params: ProbitParams,
    design: ProbitDesign,
    terms: typing.Sequence[str],
    converged: bool = True,
    iterations: int = 0,
) -> FittedProbit:
    """Evaluate likelihood, scores and information at given parameters."""
    _, per_obs = score(params, design)
    return FittedProbit(
        params=params,
        loglik=log_likelihood(params, design),
        per_obs_scores=per_obs,
        information=observed_information(params, design),
        converged=converged,
        iterations=iterations,
        scale=design.scale,
        terms=tuple(terms),
        term_names=design.term_names,
        n=design.n,
    )


def fit(
    dataset: Dataset,
    settings: OptimizerSettings = OptimizerSettings(),
    terms: typing.Sequence[str] | None = None,
) -> FittedProbit:
    """
    Maximum likelihood by Newton-Raphson with step halving.

    When the Hessian in the free coordinates is not negative definite the step falls back
    to steepest ascent. The converged flag is only set when the eta-score meets the
    tolerance.
    """
    terms = tuple(dataset.covariate_names if terms is None else terms)

    counts = dataset.category_counts()
    if np.any(counts == 0):
        empty = [label for label, count in zip(dataset.scale.labels, counts) if count == 0]
        if settings.empty_category == "collapse":
            dataset = collapse_empty_categories(dataset)
        else:
            raise FitError(f"Categories {empty!r} have no units; collapse them or drop them from the scale.")

    design = ProbitDesign.from_dataset(dataset, terms)
    if design.x.shape[1] >= design.n:
        raise FitError(f"Need more units ({design.n}) than terms ({design.x.shape[1]}).")

    n_cutoffs = design.scale.J - 1
    params = starting_values(design)
    theta = _to_free(params)
    loglik = log_likelihood(params, design)
    converged = False
    iteration = 0

    for iteration in range(settings.max_iterations + 1):
        total_score, _ = score(params, design)
        gradient_norm = float(np.max(np.abs(total_score)))
        logger.debug(
            "Iteration %(iteration)d: loglik=%(loglik).10g |score|=%(norm).3g",
            {"iteration": iteration, "loglik": loglik, "norm": gradient_norm},
        )

        if gradient_norm <= settings.tolerance:
            converged = True
            break

        if iteration == settings.max_iterations:
            break

        jacobian = _free_jacobian(theta, n_cutoffs)
        free_score = jacobian.T @ total_score
        free_hessian = jacobian.T @ hessian(params, design) @ jacobian + _free_curvature(theta, n_cutoffs, total_score)

        try:
            factor = scipy.linalg.cho_factor(-free_hessian)
            step = scipy.linalg.cho_solve(factor, free_score)
        except (scipy.linalg.LinAlgError, ValueError):
            logger.info(
                "Hessian not negative definite at iteration %(iteration)d, using steepest ascent",
                {"iteration": iteration},
            )
            step = free_score / max(1.0, float(np.max(np.abs(free_score))))

        for halving in range(settings.max_halvings + 1):
            trial_theta = theta + step * 0.5**halving
            try:
                trial = _from_free(trial_theta, n_cutoffs)
            except FitError:
                continue
            trial_loglik = _safe_log_likelihood(trial, design)
            # Near the optimum changes fall below rounding, so allow ties at that scale.
            if trial_loglik >= loglik - 1e-13 * (1.0 + abs(loglik)):
                break
        else:
            raise SeparationError(
                f"Step halving exhausted after {settings.max_halvings} halvings at iteration {iteration} "
                f"with |score| = {gradient_norm:.3g}; the categories may be perfectly separated by the terms "
                f"(coefficients {params.beta.tolist()!r})."
            )

        theta, params, loglik = trial_theta, trial, trial_loglik

        if np.max(np.abs(params.eta)) > settings.divergence_bound:
            raise SeparationError(
                f"Parameters diverged beyond {settings.divergence_bound:g} at iteration {iteration + 1} "
                f"(eta = {params.eta.tolist()!r}); the categories appear perfectly separated."
            )

    if loglik > -1e-8 * design.n:
        raise SeparationError(
            f"The fitted model predicts every observed category with probability one (loglik = {loglik:.3g}); "
            "the categories are perfectly separated by the terms."
        )

    if not converged:
        logger.warning(
            "Ordered probit did not converge in %(n)d iterations",
            {"n": settings.max_iterations},
        )

    return build_fit(params, design, terms, converged=converged, iterations=iteration)


@dataclasses.dataclass(frozen=True)
class PropensityDiagnostics:
    """Propensity distribution per observed category and the threshold checks."""

    table: pd.DataFrame
    mean_below: float
    mean_at: float
    share_above_threshold: float
    share_below_threshold: float

    @property
    def well_specified(self) -> bool:
        return self.mean_below < 0.5 <= self.mean_at


def propensity_by_category(fit: FittedProbit, dataset: Dataset, above: int = 2) -> PropensityDiagnostics:
    """
    Summaries of e-hat within each observed category.

    A well-specified model gives a category-monotone pattern, mean e-hat below 0.5 just
    under the threshold and at least 0.5 at it. ``share_above_threshold`` is the share of
    units in the ``above`` categories from the threshold up with e-hat > 0.5, and
    ``share_below_threshold`` the share of units in the ``above`` categories just below
    it with e-hat < 0.5.
    """
    e_hat = fit.propensity(dataset).e_hat
    rows = []
    for j, label in enumerate(dataset.scale.labels, start=1):
        values = e_hat[dataset.category == j]
        if len(values) == 0:
            rows.append({"category": label, "n": 0})
            continue
        rows.append(
            {
                "category": label,
                "n": len(values),
                "min": values.min(),
                "q1": np.quantile(values, 0.25),
                "median": np.quantile(values, 0.5),
                "q3": np.quantile(values, 0.75),
                "max": values.max(),
                "mean": values.mean(),
                "share_at_least_half": float(np.mean(values >= 0.5)),
            }
        )
    table = pd.DataFrame(rows, columns=["category", "n", "min", "q1", "median", "q3", "max", "mean", "share_at_least_half"])

    t = dataset.scale.threshold_index
    below, at = e_hat[dataset.category == t - 1], e_hat[dataset.category == t]
    near = e_hat[(dataset.category >= t) & (dataset.category < t + above)]
    under = e_hat[(dataset.category < t) & (dataset.category >= t - above)]
    return PropensityDiagnostics(
        table=table,
        mean_below=float(below.mean()) if len(below) else float("nan"),
        mean_at=float(at.mean()) if len(at) else float("nan"),
        share_above_threshold=float(np.mean(near > 0.5)) if len(near) else float("nan"),
        share_below_threshold=float(np.mean(under < 0.5)) if len(under) else float("nan"),
    )


def fit_to_dict(fit: FittedProbit) -> dict[str, typing.Any]:
    n_cutoffs = len(fit.params.cutoffs)
    names = [f"u{j}" for j in range(1, n_cutoffs + 1)] + list(fit.term_names)
    return {
        "scale": {"labels": list(fit.scale.labels), "threshold": fit.scale.threshold_label},
        "terms": list(fit.terms),
        "parameters": {name: float(value) for name, value in zip(names, fit.params.eta)},
        "loglik": float(fit.loglik),
        "converged": bool(fit.converged),
        "iterations": int(fit.iterations),
        "n": int(fit.n),
        "max_abs_score": float(np.max(np.abs(fit.total_score))),
        "information": [[float(v) for v in row] for row in fit.information],
    }


def save_fit(fit: FittedProbit, path: pathlib.Path, header: str = "") -> None:
    path.write_text(header + yaml.safe_dump(fit_to_dict(fit), sort_keys=False), encoding="utf-8")


def load_fit(path: pathlib.Path) -> FittedProbit:
    """Read a saved fit; per-observation scores are not stored and come back empty."""
    tree = yaml.safe_load(path.read_text(encoding="utf-8"))
    scale = CategoryScale.from_labels(tree["scale"]["labels"], tree["scale"]["threshold"])
    eta = np.array(list(tree["parameters"].values()), dtype=float)
    names = list(tree["parameters"])
    params = ProbitParams.from_eta(eta, scale.J - 1)
    return FittedProbit(
        params=params,
        loglik=float(tree["loglik"]),
        per_obs_scores=np.zeros((0, len(eta))),
        information=np.array(tree["information"], dtype=float),
        converged=bool(tree["converged"]),
        iterations=int(tree["iterations"]),
        scale=scale,
        terms=tuple(tree["terms"]),
        term_names=tuple(names[scale.J - 1 :]),
        n=int(tree["n"]),
    )
