"""Command-line entry point: ``ctsr <stage> --config run.yaml --out DIR``.

Exit codes: 0 on success, 2 for invalid configuration or missing/stale inputs,
1 for any other failure.
"""

from __future__ import annotations

import functools
import logging
import sys
from pathlib import Path

import click

from . import pipeline
from .config import RunConfig, ValidationError, load_config

log = logging.getLogger("ctsr")


def _resolve(config_path, seed, out) -> tuple[RunConfig, pipeline.Workspace]:
    cfg = load_config(config_path)
    if seed is not None:
        cfg = cfg.with_seed(seed)
    root = out or cfg.output
    if not root:
        raise ValidationError("no output directory: pass --out or set 'output' in the config")
    Path(root).mkdir(parents=True, exist_ok=True)
    return cfg, pipeline.Workspace(root)


def stage(fn):
    """Shared options and exit-code mapping for every subcommand."""

    @click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
                  help="YAML run configuration.")
    @click.option("--seed", type=int, default=None, help="Override the top-level seed.")
    @click.option("--out", type=click.Path(file_okay=False), default=None, help="Workspace directory.")
    @functools.wraps(fn)
    def wrapper(config_path, seed, out, **kw):
        try:
            cfg, ws = _resolve(config_path, seed, out)
            fn(cfg, ws, **kw)
        except (ValidationError, ValueError, FileNotFoundError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(2)
        except Exception as exc:  # noqa: BLE001
            log.debug("failure", exc_info=True)
            click.echo(f"failed: {type(exc).__name__}: {exc}", err=True)
            sys.exit(1)

    return wrapper


@click.group()
@click.option("-v", "--verbose", count=True, help="-v for progress, -vv for debug output.")
def main(verbose):
    """Projection super-resolution and Gaussian-field CT reconstruction pipeline."""
    level = {0: logging.WARNING, 1: logging.INFO}.get(verbose, logging.DEBUG)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


@main.command()
@stage
def phantom(cfg, ws):
    """Write the ground-truth volume."""
    path = pipeline.run_phantom(cfg, ws)
    click.echo(f"wrote {path}")


@main.command()
@stage
def degrade(cfg, ws):
    """Write the low-resolution volume and its cubic upsampling."""
    pipeline.run_degrade(cfg, ws)
    click.echo(f"wrote {ws.path(pipeline.LR)} and {ws.path(pipeline.LR_UP)}")


@main.command()
@stage
def project(cfg, ws):
    """Forward-project ground truth, LR input and the cubic-upsampled LR volume."""
    pipeline.run_project(cfg, ws)
    click.echo(f"wrote {pipeline.P_GT}/, {pipeline.P_LR}/ and {pipeline.P_LR_UP}/ under {ws.root}")


@main.command()
@stage
def sr2d(cfg, ws):
    """Super-resolve every LR projection with the diffusion sampler."""
    sr = pipeline.run_sr2d(cfg, ws)
    pas = sr.extra["pas"]
    click.echo(f"wrote {ws.path(pipeline.P_SR)} ({len(sr)} projections, "
               f"{len(pas['flagged'])} flagged by PAS)")


@main.command()
@stage
def reconstruct(cfg, ws):
    """Train the residual Gaussian field and write the final volume."""
    result = pipeline.run_reconstruct(cfg, ws)
    click.echo(f"wrote {ws.path(pipeline.RECON)} ({len(result.field)} Gaussians)")


@main.command()
@click.option("--volume", type=click.Path(dir_okay=False), default=None,
              help="Evaluate this volume instead of the reconstruction.")
@stage
def evaluate(cfg, ws, volume):
    """Compare trilinear, cubic and the reconstruction against ground truth."""
    rows = pipeline.run_evaluate(cfg, ws, volume)
    click.echo(pipeline.format_table(rows), nl=False)


@main.command("all")
@stage
def run_all(cfg, ws):
    """Run every stage in order."""
    rows = pipeline.run_all(cfg, ws)
    click.echo(pipeline.format_table(rows), nl=False)


if __name__ == "__main__":
    main()
