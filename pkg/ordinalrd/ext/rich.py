import contextlib
import typing

import rich.console
import rich.progress
import rich.table

T = typing.TypeVar("T")


def advance(
    items: typing.Iterable[T],
    progress: rich.progress.Progress,
    task: rich.progress.TaskID,
) -> typing.Iterator[T]:
    for item in items:
        yield item
        progress.advance(task)


@contextlib.contextmanager
def tracker(
    console: rich.console.Console,
    description: str,
    total: int,
) -> typing.Iterator[typing.Callable[[typing.Iterable[T]], typing.Iterable[T]]]:
    """A progress bar for ``total`` items; yields a function wrapping the iterable to track."""
    with rich.progress.Progress(
        rich.progress.SpinnerColumn(style="bar.complete", finished_text="[bar.finished]➔[/]"),
        rich.progress.TextColumn(
            text_format="[progress.description]{task.description}",
            table_column=rich.table.Column(width=30),
        ),
        rich.progress.BarColumn(),
        rich.progress.TaskProgressColumn(),
        rich.progress.MofNCompleteColumn(table_column=rich.table.Column(width=11, justify="right")),
        rich.progress.TimeRemainingColumn(),
        console=console,
        transient=not console.is_terminal,
    ) as progress:
        task = progress.add_task(description, total=total)
        yield lambda items: advance(items, progress, task)
