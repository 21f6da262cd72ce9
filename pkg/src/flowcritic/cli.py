"""Command-line harness: dataset generators, the three studies, training runs.

Every run subcommand reads an optional flat key-value config file, applies
``--seed``/``--out`` overrides, executes, prints the report location, and
exits 0 only when every check configured for the run passed. Output lands
under ``--out``, the config's ``out`` entry, or ``$FLOWCRITIC_OUT/<tag>``.
"""

from __future__ import annotations

import json
import os

import click
import numpy as np

from . import __version__
from .agent import TrainingError
from .data import dataset_load, dataset_save, make_bandit_dataset, make_gmm2d_dataset
from .runio import OUT_ENV_VAR, ConfigError, RunConfig, load_config
from .studies import (
    eval_density,
    run_bandit_compare,
    run_density_study,
    run_finetune,
    run_tabular_verify,
    run_train,
)

RUNNERS = {
    "density-study": run_density_study,
    "bandit-compare": run_bandit_compare,
    "tabular-verify": run_tabular_verify,
    "train": run_train,
    "finetune": run_finetune,
}


@click.group()
@click.version_option(__version__)
def main() -> None:
    """Offline RL with a flow-based behavior-density penalty: data
    generators, diagnostic studies, training, and theory verification."""


def _resolve_config(tag: str, config_path: str | None, seed: int | None) -> RunConfig:
    if config_path is None:
        config = RunConfig(tag=tag, seed=seed if seed is not None else 0)
    else:
        config = load_config(config_path)
        if config.tag != tag:
            raise ConfigError(f"config tag {config.tag!r} does not match subcommand {tag!r}")
        if seed is not None:
            config.seed = seed
    return config


def _execute(tag: str, config_path: str | None, seed: int | None, out: str | None) -> None:
    try:
        config = _resolve_config(tag, config_path, seed)
        report = RUNNERS[tag](config, out_override=out)
    except (ConfigError, TrainingError, FileNotFoundError) as exc:
        raise click.ClickException(str(exc))
    click.echo(f"report: {report.summary_path}")
    click.echo(f"passed: {report.passed}")
    if not report.passed:
        raise SystemExit(1)


def _run_command(tag: str, help_text: str):
    @main.command(tag, help=help_text)
    @click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
                  default=None, help="Flat key-value config file.")
    @click.option("--seed", type=int, default=None, help="Override the config seed.")
    @click.option("--out", type=click.Path(file_okay=False), default=None,
                  help="Output directory (beats config and env var).")
    def command(config_path: str | None, seed: int | None, out: str | None) -> None:
        _execute(tag, config_path, seed, out)

    return command


_run_command("density-study", "Fit all four behavior-density models on the mixture data and score them.")
_run_command("bandit-compare", "Train the agent and the baselines on one bandit dataset and compare critics.")
_run_command("tabular-verify", "Check the exact-case operator properties on seeded random MDPs.")
_run_command("train", "Offline training with periodic resumable checkpoints.")
_run_command("finetune", "Online fine-tuning of a checkpointed agent on the bandit.")


@main.command("gen-bandit")
@click.option("--n", type=int, default=10000, show_default=True, help="Number of transitions.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True,
              help="Dataset file (.jsonl for JSON lines, anything else binary).")
def gen_bandit(n: int, seed: int, out: str) -> None:
    """Generate the two-cluster bandit dataset."""
    dataset = make_bandit_dataset(n, np.random.default_rng(seed))
    _write_dataset(dataset, out)


@main.command("gen-gmm2d")
@click.option("--n", type=int, default=10000, show_default=True, help="Number of samples.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True,
              help="Dataset file (.jsonl for JSON lines, anything else binary).")
def gen_gmm2d(n: int, seed: int, out: str) -> None:
    """Generate the four-mode Gaussian mixture dataset."""
    dataset = make_gmm2d_dataset(n, np.random.default_rng(seed))
    _write_dataset(dataset, out)


def _write_dataset(dataset, out: str) -> None:
    parent = os.path.dirname(os.path.abspath(out))
    os.makedirs(parent, exist_ok=True)
    dataset_save(dataset, out)
    click.echo(f"wrote {len(dataset)} transitions to {out}")


@main.command("eval-density")
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True,
              help="Training checkpoint holding the proxy to evaluate.")
@click.option("--dataset", "dataset_path", type=click.Path(exists=True, dir_okay=False),
              required=True, help="Dataset file to score.")
@click.option("--out", type=click.Path(file_okay=False), default=None)
@click.option("--n-steps", type=int, default=None,
              help="Transport steps for the density evaluation (default: checkpointed value).")
def eval_density_cmd(checkpoint: str, dataset_path: str, out: str | None, n_steps: int | None) -> None:
    """Score a dataset under a checkpointed proxy's log-density."""
    out_dir = out or os.path.join(os.environ.get(OUT_ENV_VAR, "."), "eval-density")
    try:
        dataset = dataset_load(dataset_path)
        summary = eval_density(checkpoint, dataset, out_dir, n_steps=n_steps)
    except (ConfigError, FileNotFoundError, KeyError, ValueError) as exc:
        raise click.ClickException(str(exc))
    click.echo(json.dumps(summary, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
