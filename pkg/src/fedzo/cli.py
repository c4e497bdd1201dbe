"""``fedzo`` command line. Exit codes: 0 ok, 2 config error, 3 runtime error."""

from __future__ import annotations

import json
import sys
from dataclasses import replace
from pathlib import Path

import click
import tomli

from .config import ConfigError, parse_config
from .experiment import build, grid_run, make_dataset, make_partition, run_experiment
from .pmi import segment, tokenize

EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _load(path: str, seed: int | None):
    try:
        cfg = parse_config(Path(path))
    except ConfigError as exc:
        _fail(EXIT_CONFIG, str(exc))
    except OSError as exc:
        _fail(EXIT_CONFIG, f"cannot read config: {exc}")
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    return cfg


@click.group()
def main():
    """Federated black-box prompt tuning experiments."""


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False))
@click.option("--seed", type=int, default=None)
@click.option("--out-dir", type=click.Path(file_okay=False), default=None)
def run(config_path, seed, out_dir):
    """Run one experiment and write metrics.csv, params.json and a replay snapshot."""
    cfg = _load(config_path, seed)
    out = Path(out_dir or cfg.output.dir)
    try:
        table = run_experiment(cfg, out)
    except ConfigError as exc:
        _fail(EXIT_CONFIG, str(exc))
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        _fail(EXIT_RUNTIME, f"{type(exc).__name__}: {exc}")
    click.echo(f"{len(table.global_rows())} rounds, final loss {table.final_loss():.6g} -> {out}")


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False))
@click.option("--grid", "grid_path", required=True, type=click.Path(dir_okay=False),
              help='TOML file with a [grid] table, e.g. "optimizer.pge.lr" = [1e-4, 1e-5]')
@click.option("--seed", type=int, default=None)
@click.option("--out-dir", type=click.Path(file_okay=False), default=None)
def grid(config_path, grid_path, seed, out_dir):
    """Run every combination of the grid values."""
    cfg = _load(config_path, seed)
    try:
        table = tomli.loads(Path(grid_path).read_text()).get("grid", {})
    except (OSError, tomli.TOMLDecodeError) as exc:
        _fail(EXIT_CONFIG, f"cannot read grid: {exc}")
    out = Path(out_dir or cfg.output.dir)
    try:
        tables = grid_run(cfg, table, out)
    except ConfigError as exc:
        _fail(EXIT_CONFIG, str(exc))
    except Exception as exc:  # noqa: BLE001
        _fail(EXIT_RUNTIME, f"{type(exc).__name__}: {exc}")
    click.echo(f"{len(tables)} cells -> {out / 'summary.csv'}")


@main.command()
@click.option("--corpus", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--threshold", required=True, type=float)
@click.option("--size", default=200, show_default=True, type=int)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def vocab(corpus, threshold, size, out):
    """Build a prompt vocabulary by PMI segmentation of a text file (one sentence per line)."""
    lines = [tokenize(line) for line in Path(corpus).read_text().splitlines()]
    try:
        voc = segment(lines, threshold, size)
    except ValueError as exc:
        _fail(EXIT_RUNTIME, str(exc))
    Path(out).write_text(json.dumps(voc.to_json(), indent=1) + "\n")
    click.echo(f"{len(voc)} entries -> {out}")


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False))
@click.option("--seed", type=int, default=None)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def partition(config_path, seed, out):
    """Dump the client partition an experiment would use."""
    cfg = _load(config_path, seed)
    try:
        ds = make_dataset(cfg, cfg.seed)
        part = make_partition(cfg, ds, cfg.seed)
    except ConfigError as exc:
        _fail(EXIT_CONFIG, str(exc))
    Path(out).write_text(json.dumps(part.to_json()) + "\n")
    click.echo(f"{part.num_clients} clients, sizes {part.sizes()} -> {out}")


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False))
def validate(config_path):
    """Check a config file without running anything."""
    cfg = _load(config_path, None)
    try:
        build(replace(cfg, federation=replace(cfg.federation, rounds=0)))
    except (ConfigError, OSError, KeyError, ValueError) as exc:
        _fail(EXIT_CONFIG, str(exc))
    click.echo("ok")


if __name__ == "__main__":
    main()
