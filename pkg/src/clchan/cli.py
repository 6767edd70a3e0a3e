"""``clchan`` command line: generate | run | sweep | summarize.

Exit codes: 0 success, 1 configuration error, 2 training diverged in at least
one cell (the other cells' results are still written).
"""

import logging
import sys

import click

from . import kernels
from .config import ConfigError, parse_config
from .runner import generate_datasets, run_experiment, summarize_dir, sweep_from_checkpoints

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2


def _load(path):
    try:
        return parse_config(path)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)


@click.group()
@click.option("-v", "--verbose", count=True, help="-v for progress, -vv for per-epoch losses.")
@click.option(
    "--kernels",
    "backend",
    type=click.Choice(["auto", *kernels.available()]),
    default="auto",
    show_default=True,
    help="Kernel backend.",
)
def main(verbose, backend):
    """Continual-learning experiments for channel prediction."""
    logging.basicConfig(
        level=[logging.WARNING, logging.INFO, logging.DEBUG][min(verbose, 2)],
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    if backend != "auto":
        kernels.set_backend(backend)


@main.command()
@click.argument("config", type=click.Path(dir_okay=False))
def generate(config):
    """Write the train and held-out datasets of every seed to OUTPUT/datasets."""
    cfg = _load(config)
    try:
        paths = generate_datasets(cfg)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    click.echo(f"wrote {len(paths)} datasets under {cfg.output}")


@main.command()
@click.argument("config", type=click.Path(dir_okay=False))
@click.option("-j", "--workers", type=click.IntRange(min=1), default=None, help="Worker threads (default: config value).")
def run(config, workers):
    """Train every (seed, regimen, backbone) cell and write the result files."""
    cfg = _load(config)
    try:
        res = run_experiment(cfg, workers=workers)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    n = len(res.cells)
    click.echo(f"{n - len(res.failed)}/{n} cells finished; results in {res.output}")
    if res.failed:
        for err in res.failed:
            click.echo(f"diverged: {err['run_id']}: {err['error']}", err=True)
        sys.exit(EXIT_DIVERGED)


@main.command()
@click.argument("config", type=click.Path(dir_okay=False))
def sweep(config):
    """Redo the NMSE-vs-SNR sweep from the final checkpoints of an earlier run."""
    cfg = _load(config)
    try:
        rows = sweep_from_checkpoints(cfg)
    except FileNotFoundError as exc:
        raise click.ClickException(str(exc)) from None
    click.echo(f"wrote {len(rows)} sweep rows to {cfg.output}/sweep.csv")


@main.command()
@click.argument("output", type=click.Path(exists=True, file_okay=False))
def summarize(output):
    """Recompute forgetting.csv and summary.csv from eval.csv and memory.csv."""
    rows = summarize_dir(output)
    for r in rows:
        click.echo(f"{r['regimen']:6s} {r['backbone']:6s} {r['metric']:17s} {r['median']:.6g} [{r['p25']:.6g}, {r['p75']:.6g}]")


if __name__ == "__main__":
    main()
