"""
Output files of a run.

Machine-readable tables are tab separated, start with the manifest hash and seed, and
print floats with a fixed format so reruns are byte-identical. report.txt collects the
same tables as aligned text.
"""

import dataclasses
import logging
import pathlib

import pandas as pd

from ordinalrd.errors import ManifestError
from ordinalrd.probit import FittedProbit, save_fit

logger = logging.getLogger(__name__)

PROBIT = "probit.txt"
PROPENSITY_BY_CATEGORY = "propensity_by_category.tsv"
BALANCE_SYMMETRIC = "balance_symmetric.tsv"
BALANCE_ASYMMETRIC = "balance_asymmetric.tsv"
ESTIMATES = "estimates.tsv"
INFLUENCE = "influence.tsv"
REPORT = "report.txt"
SUMMARY = "summary.tsv"
DROPS = "drops.tsv"
OUTCOME_BY_CATEGORY = "outcome_by_category.tsv"

FLOAT_FORMAT = "%.10g"


def to_tsv(frame: pd.DataFrame, header: str) -> str:
    return header + frame.to_csv(sep="\t", index=False, float_format=FLOAT_FORMAT, lineterminator="\n")


@dataclasses.dataclass()
class Artifacts:
    directory: pathlib.Path
    header: str
    sections: list[tuple[str, str]] = dataclasses.field(default_factory=list)
    written: list[pathlib.Path] = dataclasses.field(default_factory=list)

    def __post_init__(self) -> None:
        try:
            self.directory.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise ManifestError(f"Could not create output directory {self.directory}: {e.strerror}") from e

    def _write(self, name: str, text: str) -> pathlib.Path:
        path = self.directory / name
        path.write_text(text, encoding="utf-8")
        self.written.append(path)
        logger.info("Wrote %(path)s", {"path": str(path)})
        return path

    def table(self, name: str, frame: pd.DataFrame, title: str | None = None) -> pathlib.Path:
        if title is not None:
            self.note(title, frame.to_string(index=False, float_format=lambda v: f"{v:.6g}"))
        return self._write(name, to_tsv(frame, self.header))

    def probit(self, fit: FittedProbit) -> pathlib.Path:
        path = self.directory / PROBIT
        save_fit(fit, path, header=self.header)
        self.written.append(path)
        return path

    def note(self, title: str, text: str) -> None:
        self.sections.append((title, text))

    def report(self) -> pathlib.Path:
        blocks = [self.header.rstrip("\n")]
        for title, text in self.sections:
            blocks.append(f"{title}\n{'-' * len(title)}\n{text}")
        return self._write(REPORT, "\n\n".join(blocks) + "\n")
