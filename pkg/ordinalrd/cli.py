import dataclasses
import logging
import pathlib
import typing

import click

from ordinalrd.app import Application
from ordinalrd.manifest import load_manifest, load_simulation_manifest


@dataclasses.dataclass()
class Context:
    app: Application
    manifest: pathlib.Path
    out: pathlib.Path | None
    seed: int | None
    strict: bool | None


@click.group(name="ordinalrd")
@click.option(
    "--manifest",
    "manifest",
    required=True,
    type=click.Path(dir_okay=False, file_okay=True, path_type=pathlib.Path),
    help="YAML manifest describing the study or simulation.",
)
@click.option(
    "--out",
    default=None,
    type=click.Path(dir_okay=True, file_okay=False, path_type=pathlib.Path),
    help="Output directory; overrides the manifest's 'output'.",
)
@click.option(
    "--seed",
    default=None,
    type=click.IntRange(min=0, max=2**64 - 1),
    help="Overrides the manifest's 'seed'.",
)
@click.option(
    "--workers",
    default=1,
    type=click.IntRange(min=1),
    help="Worker processes for Monte Carlo and bootstrap runs. Results do not depend on it.",
)
@click.option(
    "--strict/--lenient",
    "strict",
    default=None,
    help="Reject (strict) or drop and log (lenient) rows with missing or unparseable fields.",
)
@click.option(
    "-v",
    "--verbose",
    count=True,
    help="Show WARNING (-v), INFO (-vv), and DEBUG (-vvv) logs.",
)
@click.pass_context
def main(
    ctx: click.Context,
    manifest: pathlib.Path,
    out: typing.Optional[pathlib.Path],
    seed: typing.Optional[int],
    workers: int,
    strict: typing.Optional[bool],
    verbose: int,
) -> None:
    verbosity = {
        0: logging.ERROR,
        1: logging.WARNING,
        2: logging.INFO,
        3: logging.DEBUG,
    }
    logging.basicConfig(level=verbosity[min(verbose, 3)])

    ctx.obj = Context(app=Application(workers=workers), manifest=manifest, out=out, seed=seed, strict=strict)


@main.command()
@click.pass_obj
def validate(context: Context) -> None:
    """
    Load the data, apply the exclusion rules and write the summary tables.

    Writes summary.tsv, drops.tsv and report.txt. Exits with 2 for manifest problems
    and 3 for data problems.
    """
    manifest = load_manifest(context.manifest).override(context.out, context.seed, context.strict)
    context.app.validate(manifest)


@main.command()
@click.pass_obj
def run(context: Context) -> None:
    """
    Run the full analysis.

    Fits the ordered probit, searches for balanced intervals for each weighting scheme,
    and writes the estimates with sandwich standard errors. Artifacts are written as
    each stage finishes, so a failed run keeps everything up to the failing stage.
    """
    manifest = load_manifest(context.manifest).override(context.out, context.seed, context.strict)
    context.app.run(manifest)


@main.command()
@click.option(
    "--control",
    required=True,
    type=click.Path(dir_okay=False, file_okay=True, exists=True, path_type=pathlib.Path),
    help="Negative-control table with the same columns as the study data.",
)
@click.pass_obj
def falsify(context: Context, control: pathlib.Path) -> None:
    """
    Run the analysis on a negative-control sample where the effect must be null.

    Results go to <output>/falsification. Prints PASS when no estimate is significant
    at the manifest's 'inference.significance' level.
    """
    manifest = load_manifest(context.manifest).override(context.out, context.seed, context.strict)
    context.app.falsify(manifest, control)


@main.command()
@click.pass_obj
def simulate(context: Context) -> None:
    """
    Run a Monte Carlo or bootstrap study from a simulation manifest.
    """
    manifest = load_simulation_manifest(context.manifest).override(context.out, context.seed)
    context.app.simulate(manifest)
