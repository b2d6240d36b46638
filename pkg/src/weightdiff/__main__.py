"""Command-line entry point: prepare, train, eval, ablate, recover, verify, monitor."""

from __future__ import annotations

import functools
import logging
import sys
from pathlib import Path

import click

from .config import ConfigError, ExperimentConfig, load_config
from .harness import (
    CHECKPOINT_NAME,
    METRICS_NAME,
    AcceptanceFailed,
    VerificationFailed,
    run_ablation,
    run_eval,
    run_prepare,
    run_recovery,
    run_train,
    run_verify,
)

log = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

EXIT_USAGE = 1
EXIT_VERIFICATION = 2
EXIT_RUNTIME = 3


def experiment_options(fn):
    """--config / --out / --seed, resolved into an ExperimentConfig passed as `cfg`."""

    @click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False, path_type=Path),
                  default=None, help="key=value config file (defaults when omitted)")
    @click.option("--out", "out_dir", type=click.Path(file_okay=False, path_type=Path), required=True,
                  help="Output directory")
    @click.option("--seed", type=click.IntRange(min=0), default=None, help="Override run.base_seed")
    @functools.wraps(fn)
    def wrapper(config_path: Path | None, seed: int | None, **kwargs):
        return fn(cfg=load_config(config_path, seed), **kwargs)

    return wrapper


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Debug logging")
def cli(verbose: bool) -> None:
    """Meta-learned weight generation with local consistency diffusion."""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, format=LOG_FORMAT)


@cli.command()
@experiment_options
def prepare(cfg: ExperimentConfig, out_dir: Path) -> None:
    """Collect optimization trajectories for train and held-out tasks."""
    run_prepare(cfg, out_dir)


@cli.command()
@experiment_options
@click.option("--trajectories", type=click.Path(file_okay=False, path_type=Path), default=None,
              help="Directory written by `prepare` (defaults to --out)")
def train(cfg: ExperimentConfig, out_dir: Path, trajectories: Path | None) -> None:
    """Meta-train the denoiser on prepared trajectories."""
    run_train(cfg, trajectories or out_dir, out_dir / CHECKPOINT_NAME)


@cli.command(name="eval")
@experiment_options
@click.option("--trajectories", type=click.Path(file_okay=False, path_type=Path), default=None,
              help="Directory written by `prepare` (defaults to --out)")
@click.option("--checkpoint", type=click.Path(dir_okay=False, path_type=Path), default=None,
              help=f"Denoiser checkpoint (defaults to <out>/{CHECKPOINT_NAME})")
@click.option("--finetune-steps", type=click.IntRange(min=0), default=None,
              help="Adam steps on the support set before scoring (overrides run.finetune_steps)")
def evaluate(
    cfg: ExperimentConfig,
    out_dir: Path,
    trajectories: Path | None,
    checkpoint: Path | None,
    finetune_steps: int | None,
) -> None:
    """Generate weights for held-out tasks and write metrics."""
    out_dir.mkdir(parents=True, exist_ok=True)
    run_eval(
        cfg,
        checkpoint or out_dir / CHECKPOINT_NAME,
        trajectories or out_dir,
        out_dir / METRICS_NAME,
        finetune_steps,
    )


@cli.command()
@experiment_options
def ablate(cfg: ExperimentConfig, out_dir: Path) -> None:
    """Variant ladder and segment-number sweep over several seeds."""
    run_ablation(cfg, out_dir)


@cli.command()
@experiment_options
def recover(cfg: ExperimentConfig, out_dir: Path) -> None:
    """Train on one task and check that every segment readout reaches its target."""
    run_recovery(cfg, out_dir)


@cli.command()
@experiment_options
def verify(cfg: ExperimentConfig, out_dir: Path) -> None:
    """Numerical checks of the equivalence, convergence bounds and gradients."""
    run_verify(cfg, out_dir)


@cli.command()
@experiment_options
def monitor(cfg: ExperimentConfig, out_dir: Path) -> None:
    """Interactive terminal monitor for a full run."""
    from .app import ExperimentMonitor

    ExperimentMonitor(cfg, out_dir).run()


def main(argv: list[str] | None = None) -> None:
    try:
        cli.main(args=argv, prog_name="weightdiff", standalone_mode=False)
    except click.ClickException as e:
        e.show()
        sys.exit(EXIT_USAGE)
    except click.Abort:
        click.echo("Aborted!", err=True)
        sys.exit(EXIT_USAGE)
    except ConfigError as e:
        click.echo(f"config error: {e}", err=True)
        sys.exit(EXIT_USAGE)
    except VerificationFailed as e:
        click.echo(f"verification failed: {e}", err=True)
        sys.exit(EXIT_VERIFICATION)
    except AcceptanceFailed as e:
        click.echo(str(e), err=True)
        sys.exit(EXIT_VERIFICATION)
    except Exception as e:
        log.exception("run failed")
        click.echo(f"error: {e}", err=True)
        sys.exit(EXIT_RUNTIME)


if __name__ == "__main__":
    main()
