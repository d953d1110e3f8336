import collections
import dataclasses
import logging
import pathlib
import typing

import inflect
import pandas as pd
import rich
import rich.console
import rich.status
import rich.theme
import yaml

from ordinalrd import artifacts as names
from ordinalrd.artifacts import Artifacts
from ordinalrd.balance import WeightScheme, search_asymmetric, search_symmetric
from ordinalrd.dataset import Dataset, Standardization, apply_exclusion_rules, load_dataset, standardize, summarize
from ordinalrd.errors import AnalysisException, BalanceError, DataError
from ordinalrd.estimate import EffectEstimate
from ordinalrd.ext.rich import tracker
from ordinalrd.manifest import AnalysisManifest, SimulationManifest
from ordinalrd.pipeline import estimate_effect, run_pipeline
from ordinalrd.probit import FittedProbit, fit, fit_to_dict, propensity_by_category
from ordinalrd.simlab import bootstrap_se, generate, monte_carlo
from ordinalrd.variance import dump_decomposition, influence_diagnostics

OutputContextValue = typing.Union[typing.Callable[[], typing.Any], typing.Any]

console = rich.console.Console(
    theme=rich.theme.Theme(
        {
            "scheme": "cyan",
            "path": "blue",
            "number": "magenta",
        }
    )
)

p = inflect.engine()

logger = logging.getLogger(__name__)


def plural(text: str, count: int) -> str:
    return f"{count} {p.plural(text, count)}"


def join(items: typing.Collection) -> str:
    return p.join([str(item) for item in items])


class OutputContext(collections.UserDict[str, OutputContextValue]):
    def __getitem__(self, item: str) -> str:
        value = super().__getitem__(item)
        return value() if callable(value) else value


@dataclasses.dataclass()
class Output:
    context: OutputContext

    def __init__(self, **context: OutputContextValue) -> None:
        self.context = OutputContext(context)

    def format(self, text: str) -> str:
        return text.format_map(self.context)

    def status(self, text: str) -> rich.status.Status:
        return rich.status.Status(self.format(text), console=console, speed=2.0)

    def done(self, task: str) -> None:
        console.print("[green]✓[/]", self.format(task), highlight=False)

    def warn(self, task: str) -> None:
        console.print("[yellow]![/]", self.format(task), highlight=False)

    def failed(self, task: str) -> None:
        console.print("[red]✗[/]", self.format(task), highlight=False)

    @classmethod
    def format_scheme(cls, scheme: WeightScheme) -> str:
        return f"[scheme]{scheme}[/]"

    @classmethod
    def format_path(cls, path: pathlib.Path) -> str:
        return f"[path]{path}[/]"


def _with_column(frame: pd.DataFrame, name: str, value: typing.Any) -> pd.DataFrame:
    frame = frame.copy()
    frame.insert(0, name, value)
    return frame


@dataclasses.dataclass()
class Application:
    workers: int = 1

    def load(self, manifest: AnalysisManifest, data: pathlib.Path, out: Artifacts) -> Dataset:
        """Load the table, apply exclusions and write the summary and drop log."""
        output = Output(data=Output.format_path(data))
        with output.status("Loading {data}..."):
            try:
                dataset = load_dataset(data, manifest.table)
            except FileNotFoundError as e:
                raise DataError(f"Data file {data} does not exist.") from e

        drops = pd.DataFrame(
            [{"row": drop.row, "id": drop.id, "reason": drop.reason} for drop in dataset.drops],
            columns=["row", "id", "reason"],
        )
        out.table(names.DROPS, drops)
        if dataset.drops:
            Output(rows=plural("row", len(dataset.drops))).warn("Dropped {rows} with missing or unparseable fields.")

        dataset, counts = apply_exclusion_rules(dataset, manifest.exclusions)
        for rule, count in counts:
            Output(rule=rule, units=plural("unit", count)).done("Rule {rule} excluded {units}.")

        summary = summarize(dataset)
        out.note("Categories", summary.categories.to_string(index=False))
        out.table(names.SUMMARY, summary.covariates.reset_index(), title="Covariates")
        out.table(names.OUTCOME_BY_CATEGORY, summary.outcomes, title="Outcome by category")
        Output(units=plural("unit", dataset.n), data=Output.format_path(data)).done("Loaded {units} from {data}.")
        return dataset

    def validate(self, manifest: AnalysisManifest) -> Dataset:
        out = Artifacts(manifest.output, manifest.header)
        try:
            return self.load(manifest, manifest.data, out)
        except AnalysisException as e:
            self.record_error(out, e)
            raise
        finally:
            out.report()

    def record_error(self, out: Artifacts, error: AnalysisException) -> None:
        frame = pd.DataFrame([{"stage": error.stage, "exit_code": error.exit_code, "message": error.message}])
        out.table("errors.tsv", frame)
        out.note("Error", f"[{error.stage}] {error.message}")
        Output(stage=error.stage).failed("Stopped at the {stage} stage.")

    def fit_probit(self, manifest: AnalysisManifest, dataset: Dataset, out: Artifacts) -> FittedProbit:
        output = Output(units=plural("unit", dataset.n))
        with output.status("Fitting the ordered probit on {units}..."):
            fitted = fit(dataset, manifest.optimizer, manifest.probit_terms)
        out.probit(fitted)
        summary = {key: value for key, value in fit_to_dict(fitted).items() if key != "information"}
        out.note("Ordered probit", yaml.safe_dump(summary, sort_keys=False).rstrip())

        if fitted.converged:
            Output(n=fitted.iterations).done("Ordered probit converged in {n} iterations.")
        else:
            Output(n=fitted.iterations).warn("Ordered probit did not converge in {n} iterations.")
        return fitted

    def analyse(self, manifest: AnalysisManifest, data: pathlib.Path, out: Artifacts) -> list[EffectEstimate]:
        """The full pipeline on one table, writing each artifact as soon as its stage finishes."""
        dataset = self.load(manifest, data, out)
        standardization: Standardization | None = None
        if manifest.standardize:
            dataset, standardization = standardize(dataset)

        fitted = self.fit_probit(manifest, dataset, out)
        if standardization is not None and (original := fitted.original_scale(standardization, dataset.covariate_names)):
            original_names = [f"u{j}" for j in range(1, len(original.cutoffs) + 1)] + list(fitted.term_names)
            out.note("Ordered probit, original covariate scale", pd.Series(original.eta, index=original_names).to_string())

        propensity = fitted.propensity(dataset)
        diagnostics = propensity_by_category(fitted, dataset)
        out.table(names.PROPENSITY_BY_CATEGORY, diagnostics.table, title="Propensity by category")
        out.note(
            "Threshold checks",
            f"mean e-hat just below threshold: {diagnostics.mean_below:.4f}\n"
            f"mean e-hat at threshold: {diagnostics.mean_at:.4f}\n"
            f"share with e-hat > 0.5 in the categories from the threshold up: {diagnostics.share_above_threshold:.4f}\n"
            f"share with e-hat < 0.5 in the categories just below the threshold: {diagnostics.share_below_threshold:.4f}",
        )
        if not diagnostics.well_specified:
            Output().warn("Mean propensities around the threshold do not straddle 0.5.")

        symmetric = {
            scheme: search_symmetric(dataset, propensity.e_hat, scheme, manifest.search)
            for scheme in (*manifest.schemes, WeightScheme.NONE)
        }
        trace = pd.concat([_with_column(search.table(), "scheme", str(scheme)) for scheme, search in symmetric.items()])
        out.table(names.BALANCE_SYMMETRIC, trace, title="Symmetric search")

        unbalanced = [scheme for scheme in manifest.schemes if symmetric[scheme].interval is None]
        if unbalanced:
            out.note("Balance", f"no balanced symmetric interval for {join(unbalanced)}")
            raise BalanceError(f"No balanced symmetric interval for {join(unbalanced)} weights.")

        intervals = {}
        asymmetric_tables = []
        for scheme in manifest.schemes:
            start = symmetric[scheme].interval
            assert start is not None
            asymmetric = search_asymmetric(dataset, propensity.e_hat, scheme, start, manifest.search)
            intervals[scheme] = asymmetric.interval
            asymmetric_tables.append(_with_column(asymmetric.table(), "scheme", str(scheme)))
            Output(scheme=Output.format_scheme(scheme), start=start, interval=asymmetric.interval).done(
                "{scheme}: balanced on {start}, extended to {interval}."
            )
        out.table(names.BALANCE_ASYMMETRIC, pd.concat(asymmetric_tables), title="Asymmetric search")

        estimates = []
        influence = []
        for scheme in manifest.schemes:
            with Output(scheme=Output.format_scheme(scheme)).status("Estimating {scheme}..."):
                estimate, decomposition = estimate_effect(
                    scheme, dataset, propensity, fitted, intervals[scheme], manifest.outcome_terms, manifest.inference.level
                )
            estimates.append(estimate)
            flagged = influence_diagnostics(decomposition, manifest.inference.influence_factor)
            influence.append(_with_column(flagged, "estimand", str(scheme)))
            audit = yaml.safe_dump(dump_decomposition(decomposition), sort_keys=False).rstrip()
            out.note(f"Sandwich decomposition ({scheme})", audit)

        out.table(names.ESTIMATES, pd.DataFrame([estimate.row() for estimate in estimates]), title="Estimates")
        out.table(names.INFLUENCE, pd.concat(influence))
        return estimates

    def run(self, manifest: AnalysisManifest) -> list[EffectEstimate]:
        out = Artifacts(manifest.output, manifest.header)
        try:
            estimates = self.analyse(manifest, manifest.data, out)
        except AnalysisException as e:
            self.record_error(out, e)
            raise
        finally:
            out.report()

        for estimate in estimates:
            Output(
                scheme=Output.format_scheme(estimate.estimand),
                tau=f"{estimate.tau:.4g}",
                se=f"{estimate.se:.4g}",
                p=f"{estimate.p_value:.3g}",
            ).done("{scheme}: estimate {tau} (se {se}, p {p}).")
        Output(path=Output.format_path(manifest.output)).done("Wrote artifacts to {path}.")
        return estimates

    def falsify(self, manifest: AnalysisManifest, control: pathlib.Path) -> bool:
        """Run the pipeline on a negative-control table; passes when no estimate is significant."""
        directory = manifest.output / "falsification"
        out = Artifacts(directory, manifest.header)
        out.note("Falsification", f"negative-control data: {control}")
        try:
            estimates = self.analyse(manifest, control, out)
        except AnalysisException as e:
            self.record_error(out, e)
            out.report()
            raise

        significance = manifest.inference.significance
        passed = all(estimate.p_value >= significance for estimate in estimates)
        lines = [
            f"{estimate.estimand}: estimate {estimate.tau:.6g}, se {estimate.se:.6g}, p-value {estimate.p_value:.4g}"
            for estimate in estimates
        ]
        lines.append(f"{'PASS' if passed else 'FAIL'} at the {significance:g} significance level")
        out.note("Falsification result", "\n".join(lines))
        out.report()

        for line in lines[:-1]:
            console.print(line, highlight=False)
        output = Output(level=f"{significance:g}")
        if passed:
            output.done("PASS: no estimate is significant at the {level} level.")
        else:
            output.failed("FAIL: an estimate is significant at the {level} level.")
        return passed

    def simulate(self, manifest: SimulationManifest) -> None:
        out = Artifacts(manifest.output, manifest.header)
        try:
            if manifest.mode == "bootstrap":
                self.simulate_bootstrap(manifest, out)
            else:
                self.simulate_monte_carlo(manifest, out)
        except AnalysisException as e:
            self.record_error(out, e)
            raise
        finally:
            out.report()
        Output(path=Output.format_path(manifest.output)).done("Wrote simulation reports to {path}.")

    def simulate_monte_carlo(self, manifest: SimulationManifest, out: Artifacts) -> None:
        settings = manifest.pipeline_settings()
        significance = manifest.inference.significance
        sizes = manifest.sample_sizes or (manifest.dgp.n,)
        summaries = []
        records = []

        for n in sizes:
            config = dataclasses.replace(manifest.dgp, n=n)
            description = f"Replicating {manifest.estimand} at N={n}"
            with tracker(console, description, manifest.replications) as track:
                report = monte_carlo(
                    config, settings, manifest.estimand, manifest.replications, workers=self.workers, track=track
                )
            summaries.append({"n": n, **report.summary(), "pass_rate": report.pass_rate(significance)})
            records.append(_with_column(report.records, "n", n))
            Output(n=n, bias=f"{report.mean_bias:.4g}", coverage=f"{report.coverage:.3f}").done(
                "N={n}: mean bias {bias}, coverage {coverage}."
            )

        out.table("mc_summary.tsv", pd.DataFrame(summaries), title="Monte Carlo summary")
        out.table("mc_records.tsv", pd.concat(records))

    def simulate_bootstrap(self, manifest: SimulationManifest, out: Artifacts) -> None:
        settings = manifest.pipeline_settings()
        sample = generate(manifest.dgp)
        reference = run_pipeline(sample.dataset, manifest.estimand, settings).estimate

        with tracker(console, f"Resampling {manifest.estimand}", manifest.resamples) as track:
            result = bootstrap_se(
                sample.dataset, settings, manifest.estimand, manifest.resamples, manifest.seed, self.workers, track
            )

        summary = pd.DataFrame(
            [
                {
                    "estimand": str(manifest.estimand),
                    "estimate": reference.tau,
                    "sandwich_se": reference.se,
                    "bootstrap_se": result.se,
                    "ratio": result.se / reference.se,
                    "resamples": result.resamples,
                    "skipped": result.skipped,
                }
            ]
        )
        out.table("bootstrap_summary.tsv", summary, title="Bootstrap summary")
        out.table("bootstrap_estimates.tsv", pd.DataFrame({"resample_estimate": result.estimates}))
        Output(boot=f"{result.se:.4g}", sandwich=f"{reference.se:.4g}").done("Bootstrap se {boot}, sandwich se {sandwich}.")

