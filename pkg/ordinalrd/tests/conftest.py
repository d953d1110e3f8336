import pathlib

import numpy as np
import pytest

from ordinalrd.dataset import CategoryScale, Dataset
from ordinalrd.simlab import DgpConfig, GeneratedSample, OutcomeFunction


def make_dataset(
    category: list[int],
    covariates: list[list[float]] | np.ndarray,
    outcome: list[float] | np.ndarray | None = None,
    labels: tuple[str, ...] = ("r1", "r2"),
    threshold: int = 2,
    names: tuple[str, ...] | None = None,
) -> Dataset:
    covariates = np.asarray(covariates, dtype=float).reshape(len(category), -1)
    return Dataset(
        scale=CategoryScale(labels=labels, threshold_index=threshold),
        ids=np.array([f"u{i}" for i in range(len(category))], dtype=object),
        category=np.asarray(category),
        outcome=np.zeros(len(category)) if outcome is None else np.asarray(outcome, dtype=float),
        covariates=covariates,
        covariate_names=names or tuple(f"x{k}" for k in range(1, covariates.shape[1] + 1)),
    )


def reference_config(n: int = 2000, seed: int = 7, **changes) -> DgpConfig:
    """Correctly specified design: linear outcomes in both covariates, a constant-plus-x1 effect."""
    settings = dict(
        n=n,
        beta=(1.0, -0.5),
        cutoffs=(-1.0, 0.0, 1.0),
        threshold_index=3,
        mu0=OutcomeFunction(terms=("x1", "x2"), coefficients=(1.0, 2.0, -1.0)),
        mu1=OutcomeFunction(terms=("x1", "x2"), coefficients=(3.0, 2.5, -1.0)),
        noise_sd=1.0,
        seed=seed,
    )
    settings.update(changes)
    return DgpConfig(**settings)


def write_study(sample: GeneratedSample, path: pathlib.Path, shift: float = 0.0) -> pathlib.Path:
    """Write a generated sample as a study table; ``shift`` is added to treated outcomes."""
    dataset = sample.dataset
    lines = ["id,spread,rating,x1,x2"]
    for i in range(dataset.n):
        y = dataset.outcome[i] + shift * dataset.treatment[i]
        label = dataset.scale.labels[dataset.category[i] - 1]
        x1, x2 = dataset.covariates[i]
        lines.append(f"{dataset.ids[i]},{float(y)!r},{label},{float(x1)!r},{float(x2)!r}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


@pytest.fixture()
def config() -> DgpConfig:
    return reference_config()
