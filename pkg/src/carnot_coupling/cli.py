"""Click based command line interface."""

import dataclasses
import logging
import os
from collections.abc import Callable, Iterable, Sequence
from pathlib import Path
from typing import Any

import click
import rich_click
from rich.console import Console
from rich.logging import RichHandler
from rich.progress import track as rich_progress_bar
from rich.table import Table

from carnot_coupling.config import ConfigError, ExperimentConfig
from carnot_coupling.experiments import (
    RATE_CSV_HEADER,
    ExperimentPreconditionError,
    ExperimentReport,
    ReplicaRunner,
    area_lemma_experiment,
    couple_experiment,
    cross_fidelity_experiment,
    exit_time_experiment,
    gradient_experiment,
    rate_experiment,
    simulate_experiment,
    tv_bound_experiment,
    verification_suite,
    wishart_experiment,
)
from carnot_coupling.path_sim import write_path_csv
from carnot_coupling.utils import write_csv, write_json

LOG_LEVELS = [logging.WARNING, logging.INFO, logging.DEBUG]

help_config = rich_click.RichHelpConfiguration(
    max_width=88,
    use_markdown=True,
)

rich_console = Console()

Experiment = Callable[
    [ExperimentConfig, ReplicaRunner], ExperimentReport | list[ExperimentReport]
]


class OutputError(click.ClickException):
    """Output directory or one of its files couldn't be written."""

    exit_code = 2


@click.group()
@rich_click.rich_config(help_config=help_config)
@click.version_option()
@click.option(
    "-v",
    "--verbose",
    count=True,
    help="Log progress (`-v`) or per-phase diagnostics (`-vv`).",
)
def cli(verbose: int) -> None:
    """Couple subRiemannian Brownian motions on step 2 Carnot groups.

    Every subcommand runs one Monte Carlo experiment described by a JSON config
    (the shipped default when `--config` is omitted), writes `report.json` (and
    `rate.csv` or `paths/*.csv` where relevant) to the output directory and exits
    with `0` when every bound check passes, `1` when one fails and `2` on a config
    or output error.
    """
    logging.basicConfig(
        level=LOG_LEVELS[min(verbose, len(LOG_LEVELS) - 1)],
        format="%(message)s",
        handlers=[RichHandler(console=rich_console, show_path=False)],
        force=True,
    )


def experiment_options(func: Callable[..., Any]) -> Callable[..., Any]:
    """Attach the options shared by every experiment subcommand."""
    options = [
        click.option(
            "--config",
            "config_path",
            type=click.Path(dir_okay=False, path_type=Path),
            default=None,
            help="Experiment config (JSON). Defaults to the shipped config.",
        ),
        click.option(
            "--set",
            "overrides",
            multiple=True,
            metavar="KEY=VALUE",
            help="Override a config value, e.g. `--set n=3` or `--set start_tilde.z=[1,0,0]`.",
        ),
        click.option(
            "--output-dir",
            type=click.Path(file_okay=False, path_type=Path),
            default=Path("output"),
            show_default=True,
            help="Directory the outputs are written to.",
        ),
        click.option(
            "--seed",
            type=int,
            default=None,
            help="Override the config seed.",
        ),
        click.option(
            "--threads",
            type=click.IntRange(min=1),
            default=lambda: os.cpu_count() or 1,
            show_default="available cores",
            help="Number of parallel workers.",
        ),
    ]
    for option in reversed(options):
        func = option(func)
    return click.pass_context(func)


def load_config(
    config_path: Path | None, overrides: Sequence[str], seed: int | None
) -> ExperimentConfig:
    """Load, override and validate the experiment config.

    Raises:
        click.UsageError: If the config is missing or invalid.
    """
    try:
        if config_path is None:
            config = ExperimentConfig.load_default()
        else:
            config = ExperimentConfig.load_from_disk(config_path)
        config = config.with_overrides(overrides)
        if seed is not None:
            config = dataclasses.replace(config, seed=seed)
    except ConfigError as e:
        raise click.UsageError(str(e)) from e

    return config


def progress_bar(jobs: Iterable[Any], description: str, total: int) -> Iterable[Any]:
    """Transient `rich` progress bar over replica batches."""
    return rich_progress_bar(
        jobs, description=description, total=total, console=rich_console, transient=True
    )


def write_outputs(reports: Sequence[ExperimentReport], output_dir: Path) -> None:
    """Write `report.json`, survival curves and sample paths.

    A single report is written as is, together with `rate.csv` when it has a survival
    curve. Several reports are wrapped in `{"verdict": ..., "experiments": [...]}`
    and their curves go to `rate_<name>.csv`.

    Raises:
        OutputError: On any I/O failure.
    """
    try:
        output_dir.mkdir(parents=True, exist_ok=True)

        if len(reports) == 1:
            report = reports[0]
            write_json(report.to_dict(), output_dir / "report.json")
            if report.curve is not None:
                write_csv(RATE_CSV_HEADER, report.curve.rows(), output_dir / "rate.csv")
        else:
            verdict = "PASS" if all(r.passed for r in reports) else "FAIL"
            document = {"verdict": verdict, "experiments": [r.to_dict() for r in reports]}
            write_json(document, output_dir / "report.json")
            for report in reports:
                if report.curve is not None:
                    path = output_dir / f"rate_{report.name}.csv"
                    write_csv(RATE_CSV_HEADER, report.curve.rows(), path)

        paths = [path for report in reports for path in report.paths]
        if paths:
            (output_dir / "paths").mkdir(exist_ok=True)
            for i, path in enumerate(paths):
                write_path_csv(path, output_dir / "paths" / f"path_{i:04d}.csv")
    except OSError as e:
        raise OutputError(f"Can't write outputs to `{output_dir}`: {e}") from e


def print_reports(reports: Sequence[ExperimentReport]) -> None:
    """Print a table of checks per report and the overall verdict."""
    for report in reports:
        style = "green" if report.passed else "red"
        rich_console.print(f"[bold]{report.name}[/bold]: [{style}]{report.verdict}[/{style}]")
        if not report.checks:
            continue

        table = Table("Check", "t", "Estimate", "CI upper", "Bound", "Verdict")
        for check in report.checks:
            if not check.in_regime:
                verdict = "[dim]n/a[/dim]"
            elif check.passed:
                verdict = "[green]PASS[/green]"
            else:
                verdict = "[red]FAIL[/red]"
            table.add_row(
                check.name,
                "" if check.t is None else f"{check.t:g}",
                f"{check.estimate:.4g}",
                f"{check.ci_upper:.4g}",
                f"{check.bound:.4g}",
                verdict,
            )
        rich_console.print(table)


def run_experiment(
    ctx: click.Context,
    experiment: Experiment,
    config_path: Path | None,
    overrides: Sequence[str],
    output_dir: Path,
    seed: int | None,
    threads: int,
) -> None:
    """Run `experiment`, write its outputs and exit with its verdict."""
    config = load_config(config_path, overrides, seed)
    runner = ReplicaRunner(threads=threads, progress=progress_bar)

    try:
        result = experiment(config, runner)
    except ExperimentPreconditionError as e:
        raise click.UsageError(str(e)) from e

    reports = [result] if isinstance(result, ExperimentReport) else result
    write_outputs(reports, output_dir)
    print_reports(reports)

    passed = all(report.passed for report in reports)
    rich_console.print(
        f"Outputs written to `{output_dir}`.", style="green" if passed else "red"
    )
    ctx.exit(0 if passed else 1)


@cli.command()
@experiment_options
def simulate(ctx: click.Context, **options: Any) -> None:
    """Simulate Brownian paths and check their Lévy areas.

    Checks the mean, the variance `T²` and the characteristic function
    `1 / cosh(T/2)` of `A = 2 (z_T - z_0)` at `T = path_time`, and writes
    `dump_paths` sample paths started at `start` to `paths/`.
    """
    run_experiment(ctx, simulate_experiment, **options)


@cli.command()
@experiment_options
def couple(ctx: click.Context, **options: Any) -> None:
    """Couple two Brownian motions and record per-phase traces."""
    run_experiment(ctx, couple_experiment, **options)


@cli.command()
@experiment_options
def rate(ctx: click.Context, **options: Any) -> None:
    """Estimate `P(τ > t)` on `t_grid` and compare it with the rate bounds."""
    run_experiment(ctx, rate_experiment, **options)


@cli.command()
@experiment_options
def tv(ctx: click.Context, **options: Any) -> None:
    """Compare a total variation estimate at `tv_time` with the coupling bounds."""
    run_experiment(ctx, tv_bound_experiment, **options)


@cli.command()
@experiment_options
def areas(ctx: click.Context, **options: Any) -> None:
    """Check truncated fiber defect means at the reflection time."""
    run_experiment(ctx, area_lemma_experiment, **options)


@cli.command(name="exit")
@experiment_options
def exit_(ctx: click.Context, **options: Any) -> None:
    """Compare the coupling time with pseudo-cube exit times over refinements."""
    run_experiment(ctx, exit_time_experiment, **options)


@cli.command()
@experiment_options
def gradient(ctx: click.Context, **options: Any) -> None:
    """Check semigroup difference quotients against the gradient bounds."""
    run_experiment(ctx, gradient_experiment, **options)


@cli.command()
@experiment_options
def wishart(ctx: click.Context, **options: Any) -> None:
    """Check the mean norms of the Wishart vector."""
    run_experiment(ctx, wishart_experiment, **options)


@cli.command()
@experiment_options
def crossfid(ctx: click.Context, **options: Any) -> None:
    """Compare event and path fidelity, and lifted Heisenberg runs, with KS tests."""
    run_experiment(ctx, cross_fidelity_experiment, **options)


@cli.command(name="verify-all")
@experiment_options
def verify_all(ctx: click.Context, **options: Any) -> None:
    """Run the whole verification suite.

    Only `seed`, `replicas` and `h` are taken from the config; every suite entry
    fixes its own dimension, start points and grids.
    """
    run_experiment(ctx, verification_suite, **options)
