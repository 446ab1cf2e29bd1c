#!/usr/bin/env python3
"""
Merge Lab CLI

This module provides the main entry point for the merge-lab command.

Exit codes: 0 success, 1 an inequality violation or reproduction mismatch,
2 a config error, 3 an I/O or checkpoint error.
"""

import sys
import traceback
from pathlib import Path
from typing import Annotated, Callable, Optional, Tuple, TypeVar

import typer

from merge_lab.bounds.lab import exact_violation_count
from merge_lab.errors import CheckpointError, ConfigError, MergeLabError, TrainingDivergedError
from merge_lab.harness.commands import (
    COMMANDS,
    cmd_bounds,
    cmd_compare,
    cmd_crosstask,
    cmd_magnitude,
    cmd_templates,
    cmd_train,
    verify as verify_command,
)
from merge_lab.harness.experiment_config import ExperimentConfig, load_config
from merge_lab.utils.config import get_config_value
from merge_lab.utils.logger import get_logger, setup_logger

logger = get_logger(__name__)

EXIT_VIOLATION = 1
EXIT_CONFIG = 2
EXIT_IO = 3

T = TypeVar("T")

app = typer.Typer(
    name="merge-lab",
    help="Train small model pools, merge them, and check the weight-averaging bounds.",
    add_completion=False,
    no_args_is_help=True,
)

ConfigOption = Annotated[
    Optional[Path], typer.Option("--config", "-c", help="Experiment file of key=value lines.")
]
OutOption = Annotated[Optional[Path], typer.Option("--out", "-o", help="Output directory.")]
SeedOption = Annotated[Optional[int], typer.Option("--seed", help="Override master_seed.")]
JobsOption = Annotated[Optional[int], typer.Option("--jobs", "-j", min=1, help="Training threads.")]
VerboseOption = Annotated[bool, typer.Option("--verbose", "-v", help="Log at DEBUG level.")]


def _guard(action: Callable[[], T]) -> T:
    """Run a command body, mapping failures to the documented exit codes."""
    try:
        return action()
    except ConfigError as e:
        logger.error(f"Config error: {e}")
        raise typer.Exit(EXIT_CONFIG)
    except TrainingDivergedError as e:
        logger.error(f"Training diverged, lower lr in the config: {e}")
        raise typer.Exit(EXIT_CONFIG)
    except (CheckpointError, OSError) as e:
        logger.error(f"I/O error: {e}")
        raise typer.Exit(EXIT_IO)
    except MergeLabError as e:
        logger.error(f"Invalid experiment settings: {e}")
        logger.debug(traceback.format_exc())
        raise typer.Exit(EXIT_CONFIG)


def _setup(
    config: Optional[Path], out: Optional[Path], seed: Optional[int], jobs: Optional[int], verbose: bool
) -> Tuple[ExperimentConfig, int]:
    setup_logger("merge_lab", "DEBUG" if verbose else None)
    cfg = _guard(
        lambda: load_config(
            config,
            output_dir=str(out) if out is not None else None,
            master_seed=seed,
        )
    )
    return cfg, jobs or int(get_config_value("default_jobs", 1))


@app.command()
def train(
    config: ConfigOption = None,
    out: OutOption = None,
    seed: SeedOption = None,
    jobs: JobsOption = None,
    verbose: VerboseOption = False,
) -> None:
    """Train the candidate pool and write one checkpoint per model."""
    cfg, n_jobs = _setup(config, out, seed, jobs, verbose)
    paths = _guard(lambda: cmd_train(cfg, n_jobs))
    typer.echo(f"{len(paths)} checkpoints in {cfg.output_dir}")


@app.command()
def compare(
    config: ConfigOption = None,
    out: OutOption = None,
    seed: SeedOption = None,
    jobs: JobsOption = None,
    verbose: VerboseOption = False,
) -> None:
    """Compare soups and ensembles across pool sizes; writes compare.csv."""
    cfg, n_jobs = _setup(config, out, seed, jobs, verbose)
    rows = _guard(lambda: cmd_compare(cfg, n_jobs))
    typer.echo(f"{len(rows)} rows in {Path(cfg.output_dir) / 'compare.csv'}")


@app.command()
def magnitude(
    config: ConfigOption = None,
    out: OutOption = None,
    seed: SeedOption = None,
    jobs: JobsOption = None,
    verbose: VerboseOption = False,
) -> None:
    """Scale every pool member by each factor and re-run the comparison."""
    cfg, n_jobs = _setup(config, out, seed, jobs, verbose)
    rows, scatter = _guard(lambda: cmd_magnitude(cfg, n_jobs))
    typer.echo(f"{len(rows)} rows and {len(scatter)} scatter points in {cfg.output_dir}")


@app.command()
def templates(
    config: ConfigOption = None,
    out: OutOption = None,
    seed: SeedOption = None,
    jobs: JobsOption = None,
    verbose: VerboseOption = False,
) -> None:
    """Train a linear classifier and render its templates as image grids."""
    cfg, n_jobs = _setup(config, out, seed, jobs, verbose)
    alignment = _guard(lambda: cmd_templates(cfg, n_jobs))
    typer.echo(
        f"min template cosine {alignment.min_cosine:.4f} (raw rows {alignment.min_plain_cosine:.4f}), "
        f"every class matched: {'yes' if alignment.all_matched else 'no'}"
    )


@app.command()
def bounds(
    config: ConfigOption = None,
    out: OutOption = None,
    seed: SeedOption = None,
    jobs: JobsOption = None,
    verbose: VerboseOption = False,
) -> None:
    """Check the averaging bounds; exits 1 on any exact violation."""
    cfg, n_jobs = _setup(config, out, seed, jobs, verbose)
    reports = _guard(lambda: cmd_bounds(cfg, n_jobs))
    for report in reports:
        typer.echo(report.to_text())
    violations = exact_violation_count(reports)
    if violations:
        typer.echo(f"{violations} exact violation(s)", err=True)
        raise typer.Exit(EXIT_VIOLATION)


@app.command()
def crosstask(
    config: ConfigOption = None,
    out: OutOption = None,
    seed: SeedOption = None,
    jobs: JobsOption = None,
    verbose: VerboseOption = False,
) -> None:
    """Merge models trained on two different tasks; writes crosstask.csv."""
    cfg, n_jobs = _setup(config, out, seed, jobs, verbose)
    rows = _guard(lambda: cmd_crosstask(cfg, n_jobs))
    for row in rows:
        typer.echo(f"{row.method}: {row.value:.2f}")


@app.command()
def verify(
    command: Annotated[str, typer.Option("--command", help=f"One of {', '.join(COMMANDS)}.")],
    config: ConfigOption = None,
    out: OutOption = None,
    seed: SeedOption = None,
    jobs: JobsOption = None,
    verbose: VerboseOption = False,
) -> None:
    """Re-run a command in a scratch directory and byte-compare its CSVs."""
    cfg, n_jobs = _setup(config, out, seed, jobs, verbose)
    if command not in COMMANDS:
        logger.error(f"Unknown command {command!r}; choose from {', '.join(COMMANDS)}")
        raise typer.Exit(EXIT_CONFIG)
    mismatched = _guard(lambda: verify_command(command, cfg, n_jobs))
    if mismatched:
        typer.echo(f"mismatch: {', '.join(mismatched)}", err=True)
        raise typer.Exit(EXIT_VIOLATION)
    typer.echo(f"{command}: reproduced")


def main() -> None:
    """
    Main entry point for the merge-lab command.
    """
    try:
        app()
    except KeyboardInterrupt:
        logger.error("Interrupted")
        sys.exit(130)


if __name__ == "__main__":
    main()
