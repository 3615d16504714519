"""Command-line entry point.

One subcommand per pipeline stage plus `run` for the whole sequence.
Config comes from a YAML file; individual keys can be overridden with
repeated `--set key=value` flags.  Exit codes: 0 success, 2 config error,
3 missing upstream artifact, 4 numerical failure.
"""

from __future__ import annotations

import dataclasses
import os
import sys
from pathlib import Path

import click

from .pipeline import (STAGES, ExperimentConfig, MissingArtifactError,
                       PipelineError, Run)

RUN_ROOT_ENV = "VISDECODE_RUN_ROOT"


def _parse_overrides(pairs: tuple[str, ...]) -> dict:
    fields = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}
    overrides = {}
    for pair in pairs:
        if "=" not in pair:
            raise click.ClickException(f"override {pair!r} is not key=value")
        key, value = pair.split("=", 1)
        if key not in fields:
            raise click.ClickException(f"unknown config key {key!r}")
        current = getattr(ExperimentConfig(), key)
        if isinstance(current, bool):
            overrides[key] = value.lower() in ("1", "true", "yes")
        elif isinstance(current, int):
            overrides[key] = int(value)
        elif isinstance(current, float):
            overrides[key] = float(value)
        else:
            overrides[key] = value
    return overrides


def _load_run(config_path, run_dir, overrides) -> Run:
    try:
        if config_path:
            cfg = ExperimentConfig.from_yaml(config_path,
                                             _parse_overrides(overrides))
        else:
            cfg = dataclasses.replace(ExperimentConfig(),
                                      **_parse_overrides(overrides))
    except (TypeError, ValueError) as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(2)
    root = Path(os.environ.get(RUN_ROOT_ENV, "."))
    return Run(root / run_dir, cfg)


def _execute(run: Run, stage: str, force: bool) -> None:
    try:
        status = run.run_stage(stage, force=force)
    except MissingArtifactError as exc:
        click.echo(f"missing artifact: {exc}", err=True)
        sys.exit(3)
    except (PipelineError, FloatingPointError, ArithmeticError) as exc:
        click.echo(f"numerical failure: {exc}", err=True)
        sys.exit(4)
    click.echo(f"{stage}: {status}")


@click.group()
def main():
    """Synthetic-world visual decoding experiments."""


def _stage_command(stage: str):
    @main.command(name=stage)
    @click.option("--config", "config_path", type=click.Path(exists=True),
                  default=None, help="YAML experiment config.")
    @click.option("--run-dir", default="run", show_default=True,
                  help=f"Run directory (under ${RUN_ROOT_ENV} if set).")
    @click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
                  help="Override a config key.")
    @click.option("--force", is_flag=True, help="Re-run even if cached.")
    def cmd(config_path, run_dir, overrides, force, _stage=stage):
        _execute(_load_run(config_path, run_dir, overrides), _stage, force)
    cmd.__doc__ = f"Run the {stage} stage."
    return cmd


for _stage in STAGES:
    _stage_command(_stage)


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--run-dir", default="run", show_default=True)
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE")
@click.option("--force", is_flag=True)
def run(config_path, run_dir, overrides, force):
    """Run every stage in order."""
    r = _load_run(config_path, run_dir, overrides)
    for stage in STAGES:
        _execute(r, stage, force)


@main.command("show-config")
def show_config():
    """Print the default configuration as YAML."""
    import yaml
    click.echo(yaml.safe_dump(dataclasses.asdict(ExperimentConfig())))


if __name__ == "__main__":
    main()
