import ast
import dataclasses
import logging
import typing

import numpy as np
import pandas as pd
import patsy

from ordinalrd.errors import ManifestError

logger = logging.getLogger(__name__)

# Term expressions may use numpy (e.g. "np.log(size)") but nothing else outside the data.
NAMESPACE = patsy.EvalEnvironment([{"np": np}])


@dataclasses.dataclass(frozen=True)
class Design:
    names: tuple[str, ...]
    matrix: np.ndarray


def formula(terms: typing.Sequence[str], intercept: bool) -> str:
    return " + ".join(["1" if intercept else "0", *terms])


def design_matrix(terms: typing.Sequence[str], frame: pd.DataFrame, intercept: bool) -> Design:
    """
    Build a design matrix from a list of term expressions.

    Terms are patsy expressions over the frame's columns: "lev", "I(cpn**2)", "lev:size".
    """
    if not terms and not intercept:
        return Design(names=(), matrix=np.zeros((len(frame), 0)))

    try:
        matrix = patsy.dmatrix(formula(terms, intercept), frame, eval_env=NAMESPACE, NA_action="raise")
    except patsy.PatsyError as e:
        raise ManifestError(f"Could not build terms {list(terms)!r}: {e}") from e

    names = tuple(matrix.design_info.column_names)
    logger.debug("Built design matrix with columns %(names)s", {"names": names})
    return Design(names=names, matrix=np.asarray(matrix, dtype=float))


def variables(terms: typing.Sequence[str]) -> set[str]:
    """Data columns referenced by the terms, excluding numpy and patsy builtins."""
    try:
        description = patsy.ModelDesc.from_formula(formula(terms, intercept=False))
    except patsy.PatsyError as e:
        raise ManifestError(f"Could not parse terms {list(terms)!r}: {e}") from e

    names: set[str] = set()
    for term in description.rhs_termlist:
        for factor in term.factors:
            tree = ast.parse(factor.code, mode="eval")
            names.update(node.id for node in ast.walk(tree) if isinstance(node, ast.Name))
    return names - {"np", "I", "C", "Q", "center", "standardize", "scale"}
