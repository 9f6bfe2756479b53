"""Command line interface for fine-tuning and export."""

from __future__ import annotations

import functools
import sys
from pathlib import Path

import click

from .config import ARCHITECTURES, SCHEDULES, TASK_CLASS_SETS, TrainConfig
from .data import TASK_FAMILY, read_labels, task_examples
from .errors import DivergenceError, TrainerError
from .export import export_onnx, write_manifest
from .train import finetune, load_checkpoint, save_checkpoint

_TASKS = sorted(TASK_CLASS_SETS)


def _cli_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except DivergenceError as exc:
            click.echo(f"training diverged: {exc}", err=True)
            sys.exit(1)
        except TrainerError as exc:
            click.echo(f"configuration error: {exc}", err=True)
            sys.exit(2)
    return wrapper


@click.group(context_settings={"auto_envvar_prefix": "FUNDUSTRAIN"})
def main() -> None:
    """Fine-tune fundus classifiers and export them for the grading engine."""


@main.command()
@click.option("--labels", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--images", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--task", required=True, type=click.Choice(_TASKS))
@click.option("--arch", required=True, type=click.Choice(sorted(ARCHITECTURES)))
@click.option("--out", required=True, type=click.Path(dir_okay=False),
              help="Checkpoint file to write.")
@click.option("--log", type=click.Path(dir_okay=False), default=None,
              help="History CSV; defaults to the checkpoint path with .csv.")
@click.option("--lr", type=float, default=None, help="Override the task's default.")
@click.option("--schedule", type=click.Choice(SCHEDULES), default=None,
              help="Override the task's default.")
@click.option("--epochs", type=click.IntRange(min=1), default=None)
@click.option("--batch-size", type=click.IntRange(min=1), default=None)
@click.option("--split-seed", type=int, default=0, show_default=True)
@_cli_errors
def train(labels, images, task, arch, out, log, lr, schedule, epochs, batch_size,
          split_seed) -> None:
    """Fine-tune one model and keep its best-validation-loss weights."""
    overrides = {"split_seed": split_seed}
    if lr is not None:
        overrides["lr"] = lr
    if schedule is not None:
        overrides["schedule"] = schedule
    if epochs is not None:
        overrides["epochs"] = epochs
    if batch_size is not None:
        overrides["batch_size"] = batch_size
    cfg = TrainConfig.for_task(task, arch, **overrides)

    rows = read_labels(labels, TASK_FAMILY[task])
    examples = task_examples(rows, task)
    log_path = Path(log) if log else Path(out).with_suffix(".csv")
    result = finetune(cfg, examples, images, log_path=log_path)
    save_checkpoint(result, out)
    click.echo(
        f"[{task}/{arch}] {cfg.epochs} epochs on {len(examples)} examples; "
        f"best val loss {result.best_val_loss:.4f} at epoch {result.best_epoch}"
    )
    click.echo(f"checkpoint written to {out}")
    click.echo(f"history written to {log_path}")


@main.command()
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False),
              help="ONNX file to write.")
@click.option("--model-id", default=None,
              help="Manifest id; defaults to the output file's stem.")
@click.option("--manifest", type=click.Path(dir_okay=False), default=None,
              help="Also write a single-model manifest here.")
@_cli_errors
def export(checkpoint, out, model_id, manifest) -> None:
    """Export a checkpoint as an ONNX file plus its manifest stanza."""
    model, payload = load_checkpoint(checkpoint)
    stanza = export_onnx(
        model, out,
        model_id=model_id or Path(out).stem,
        task=payload["task"],
    )
    click.echo(f"model written to {out}")
    if manifest:
        write_manifest([stanza], manifest)
        click.echo(f"manifest written to {manifest}")
