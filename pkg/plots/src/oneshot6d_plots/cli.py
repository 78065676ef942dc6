"""Command-line entry points: one subcommand per CSV schema."""

from __future__ import annotations

import sys

import click

from . import io, render

EXIT_SCHEMA = 2
EXIT_EMPTY = 3


def _run(input_path, output_path, columns, figure_fn):
    try:
        data = io.load_csv(input_path, columns)
    except io.EmptyInput as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_EMPTY)
    except io.SchemaError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_SCHEMA)
    render.save_svg(figure_fn(data), output_path)
    click.echo(f"wrote {output_path}")


@click.group()
def main() -> None:
    """Render SVG plots from oneshot6d evaluation CSVs."""


_input = click.option(
    "--input", "input_path", required=True,
    type=click.Path(exists=True, dir_okay=False), help="Input CSV file.",
)
_output = click.option(
    "--output", "output_path", required=True,
    type=click.Path(dir_okay=False, writable=True), help="Output SVG file.",
)


@main.command("threshold-curve")
@_input
@_output
def threshold_curve(input_path: str, output_path: str) -> None:
    """Plot recall vs ADD threshold from a curve.csv file."""
    _run(input_path, output_path, io.CURVE_COLUMNS, render.threshold_curve_figure)


@main.command("pruning")
@_input
@_output
def pruning(input_path: str, output_path: str) -> None:
    """Plot the pruning ablation from a pruning.csv file."""
    _run(input_path, output_path, io.PRUNING_COLUMNS, render.pruning_figure)


@main.command("templates")
@_input
@_output
def templates(input_path: str, output_path: str) -> None:
    """Plot the template-count ablation from a templates.csv file."""
    _run(input_path, output_path, io.TEMPLATES_COLUMNS, render.templates_figure)


@main.command("matches")
@_input
@_output
def matches(input_path: str, output_path: str) -> None:
    """Plot a match overlay from a matches.csv file."""
    _run(input_path, output_path, io.MATCHES_COLUMNS, render.matches_figure)
