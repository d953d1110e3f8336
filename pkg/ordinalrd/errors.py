"""
Exceptions raised by the analysis stages.

Each stage has its own exit code so a failed batch run tells you where it stopped:
0 success, 2 manifest, 3 data, 4 fit, 5 balance, 6 estimation/variance.
"""

import click


class AnalysisException(click.ClickException):
    exit_code = 1
    stage = "analysis"


class ManifestError(AnalysisException):
    exit_code = 2
    stage = "manifest"


class DataError(AnalysisException):
    exit_code = 3
    stage = "data"


class UnknownCategoryError(DataError):
    pass


class FitError(AnalysisException):
    exit_code = 4
    stage = "fit"


class SeparationError(FitError):
    pass


class CellUnderflowError(FitError):
    pass


class BalanceError(AnalysisException):
    exit_code = 5
    stage = "balance"


class DegenerateCovariateError(BalanceError):
    pass


class EstimationError(AnalysisException):
    exit_code = 6
    stage = "estimation"


class SingularInformationError(EstimationError):
    pass
