"""Command-line interface.

Exit codes: 0 on success, 1 when a run fails at runtime (unreadable inputs,
backend failures, mismatched reference results), 2 for configuration
problems (bad manifest, bad flags, bad labels file).

Every option can also be set through the environment with the
``FUNDUSGRADE_`` prefix, e.g. ``FUNDUSGRADE_GRADE_WORKERS=4``.
"""

from __future__ import annotations

import functools
import json
import logging
import sys
from pathlib import Path

import click

from .backends import final_class_set, load_manifest, update_retained
from .dme import dme_label_fn, grade_dme_batch
from .dr import dr_label_fn, grade_dr_batch, list_images
from .ensemble import EnsembleSpec, prune
from .errors import ConfigError, FundusGradeError
from .evaluation import SPLITS, evaluate, load_labels, split_dataset, task_dataset
from .fixtures import make_default_fixtures
from .golden import golden_report
from .preprocess import (
    RESIZE_FOR_CROPS,
    center_crop_set,
    load_image,
    resize_bilinear,
    ten_crop,
)

log = logging.getLogger(__name__)

TIE_RULE_CAVEAT = (
    "note: vote ties resolve to the lowest class index, i.e. the least severe grade"
)

FAMILY_TASKS = {"dr": ("dr-primary", "dr-expert"), "dme": ("dme-m1", "dme-m2")}
PRUNABLE_TASKS = ("dr-primary", "dr-expert", "dme-m1", "dme-m2")


def _cli_errors(fn):
    """Map library errors to the documented exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as exc:
            click.echo(f"configuration error: {exc}", err=True)
            sys.exit(2)
        except FundusGradeError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(1)
        except OSError as exc:
            click.echo(f"i/o error: {exc}", err=True)
            sys.exit(1)

    return wrapper


def _ensembles(manifest_path: str, family: str, all_models: bool) -> tuple[EnsembleSpec, EnsembleSpec]:
    manifest = load_manifest(manifest_path)
    specs = []
    for task in FAMILY_TASKS[family]:
        spec = EnsembleSpec.from_manifest(manifest, task)
        if all_models:
            spec = spec.with_all_retained()
        elif not spec.pruned:
            raise ConfigError(
                f"manifest has no retained stanza for task '{task}'; "
                "run 'fundusgrade prune' first or pass --all-models"
            )
        specs.append(spec)
    return specs[0], specs[1]


@click.group(context_settings={"auto_envvar_prefix": "FUNDUSGRADE"})
@click.option("-v", "--verbose", is_flag=True, help="Log per-image progress and warnings.")
def main(verbose: bool) -> None:
    """Grade retinal fundus images for retinopathy and macular edema."""
    logging.basicConfig(
        level=logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if verbose:
        logging.getLogger("fundusgrade").setLevel(logging.DEBUG)


@main.command()
@click.option("--manifest", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--images", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False, writable=True))
@click.option("--task", required=True, type=click.Choice(sorted(FAMILY_TASKS)))
@click.option("--no-tencrop", is_flag=True, help="Grade a single center crop instead of ten crops.")
@click.option("--all-models", is_flag=True, help="Ignore pruning and vote every declared model.")
@click.option("--workers", default=1, show_default=True, type=click.IntRange(min=1))
@_cli_errors
def grade(manifest, images, out, task, no_tencrop, all_models, workers) -> None:
    """Grade a directory of images into a CSV report."""
    tencrop = not no_tencrop
    if not list_images(images):
        raise ConfigError(f"no images found under {images}")
    if task == "dr":
        primary, expert = _ensembles(manifest, "dr", all_models)
        summary = grade_dr_batch(images, primary, expert, out, tencrop=tencrop, workers=workers)
    else:
        m1, m2 = _ensembles(manifest, "dme", all_models)
        summary = grade_dme_batch(images, m1, m2, out, tencrop=tencrop, workers=workers)
    for line in summary.lines():
        click.echo(line)
    click.echo(f"report written to {out}")
    click.echo(TIE_RULE_CAVEAT)


@main.command(name="eval")
@click.option("--manifest", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--images", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--labels", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--task", required=True, type=click.Choice(sorted(FAMILY_TASKS)))
@click.option("--split", type=click.Choice(SPLITS), default=None,
              help="Evaluate one part of a seeded 70/20/10 split instead of every row.")
@click.option("--seed", default=0, show_default=True, type=int, help="Split shuffle seed.")
@click.option("--no-tencrop", is_flag=True)
@click.option("--all-models", is_flag=True, help="Ignore pruning and vote every declared model.")
@click.option("--workers", default=1, show_default=True, type=click.IntRange(min=1))
@_cli_errors
def eval_cmd(manifest, images, labels, out, task, split, seed, no_tencrop, all_models, workers) -> None:
    """Evaluate grading accuracy against a labels CSV."""
    tencrop = not no_tencrop
    dataset = load_labels(labels, final_class_set(task), image_dir=images)
    if split is not None:
        dataset = split_dataset(dataset, seed=seed)[split]
        if not dataset.items:
            raise ConfigError(f"the '{split}' split is empty for this dataset")
    if task == "dr":
        primary, expert = _ensembles(manifest, "dr", all_models)
        label_fn = dr_label_fn(primary, expert, tencrop=tencrop)
    else:
        m1, m2 = _ensembles(manifest, "dme", all_models)
        label_fn = dme_label_fn(m1, m2, tencrop=tencrop)
    result = evaluate(label_fn, dataset, workers=workers)

    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    result.matrix.write_csv(out_dir / "confusion.csv")
    (out_dir / "confusion.txt").write_text(result.matrix.to_text())
    result.write_log(out_dir / "per_image.csv")
    click.echo(result.matrix.to_text(), nl=False)
    if result.skipped:
        click.echo(f"skipped {len(result.skipped)} unreadable image(s)")
    click.echo(f"reports written to {out_dir}")


@main.command(name="prune")
@click.option("--manifest", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--images", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--labels", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False, writable=True),
              help="Where to write the manifest with updated retained stanzas.")
@click.option("--task", "tasks", required=True, multiple=True,
              type=click.Choice(sorted(PRUNABLE_TASKS) + sorted(FAMILY_TASKS)),
              help="Model task to prune; a family name prunes both of its tasks.")
@click.option("--threshold-factor", default="0.95", show_default=True,
              help="Fraction of the benchmark's true positives a model must reach.")
@click.option("--split", type=click.Choice(SPLITS), default=None,
              help="Prune on one part of a seeded 70/20/10 split.")
@click.option("--seed", default=0, show_default=True, type=int, help="Split shuffle seed.")
@click.option("--no-tencrop", is_flag=True)
@click.option("--workers", default=1, show_default=True, type=click.IntRange(min=1))
@_cli_errors
def prune_cmd(manifest, images, labels, out, tasks, threshold_factor, split, seed, no_tencrop, workers) -> None:
    """Drop models that fall below a fraction of the benchmark's accuracy.

    The benchmark is the declared model with the most correct answers on the
    labeled images; every model reaching ceil(factor * benchmark) correct
    answers is retained, and the benchmark always survives.
    """
    expanded: list[str] = []
    for entry in tasks:
        expanded.extend(FAMILY_TASKS.get(entry, (entry,)))
    seen = set()
    ordered_tasks = [t for t in expanded if not (t in seen or seen.add(t))]

    loaded = load_manifest(manifest)
    source = manifest
    out_path = Path(out)
    for task in ordered_tasks:
        family = "dr" if task.startswith("dr") else "dme"
        dataset = load_labels(labels, final_class_set(family), image_dir=images)
        if split is not None:
            dataset = split_dataset(dataset, seed=seed)[split]
            if not dataset.items:
                raise ConfigError(f"the '{split}' split is empty for this dataset")
        bench = task_dataset(dataset, task)
        spec = EnsembleSpec.from_manifest(loaded, task).with_all_retained()
        report = prune(spec, bench, threshold_factor=threshold_factor,
                       tencrop=not no_tencrop, workers=workers)
        update_retained(source, out_path, task, list(report.retained))
        source = out_path
        report_path = report.write(out_path.parent / f"prune-{task}.json")
        click.echo(f"[{task}] benchmark {report.benchmark_id} "
                   f"({report.benchmark_tp}/{report.evaluated} correct), "
                   f"threshold {report.threshold}")
        for model_id, tp in report.per_model_tp.items():
            mark = "kept" if model_id in report.retained else "dropped"
            click.echo(f"[{task}]   {model_id}: {tp} correct -> {mark}")
        click.echo(f"[{task}] report written to {report_path}")
    click.echo(f"updated manifest written to {out_path}")


@main.command()
@click.option("--out", type=click.Path(dir_okay=False, writable=True), default=None,
              help="Also write the check report to a file.")
@_cli_errors
def golden(out) -> None:
    """Recompute the frozen reference results and verify their arithmetic."""
    text, all_ok = golden_report()
    click.echo(text, nl=False)
    if out:
        Path(out).write_text(text)
    if not all_ok:
        raise FundusGradeError("reference arithmetic check failed")


@main.command(name="preprocess-dump")
@click.option("--images", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--no-tencrop", is_flag=True)
@_cli_errors
def preprocess_dump(images, out, no_tencrop) -> None:
    """Dump per-crop checksums so two environments can be compared."""
    from .backends import tensor_checksum

    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = list_images(images)
    if not paths:
        raise ConfigError(f"no images found under {images}")
    for path in paths:
        img = load_image(path)
        resized = resize_bilinear(img, RESIZE_FOR_CROPS, RESIZE_FOR_CROPS)
        crops = ten_crop(resized) if not no_tencrop else center_crop_set(resized)
        doc = {
            "source": img.source,
            "resize": RESIZE_FOR_CROPS,
            "crops": [
                {
                    "index": c.crop,
                    "corner": tag.corner,
                    "flipped": tag.flipped,
                    "top": tag.top,
                    "left": tag.left,
                    "sha256": tensor_checksum(c),
                }
                for c, tag in zip(crops.crops, crops.provenance)
            ],
        }
        target = out_dir / f"{path.stem}.json"
        target.write_text(json.dumps(doc, indent=2) + "\n")
        click.echo(f"{path.name}: {len(crops.crops)} crops -> {target}")


@main.command(name="make-fixtures")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--seed", default=2024, show_default=True, type=int)
@_cli_errors
def make_fixtures(out, seed) -> None:
    """Generate synthetic images, labels, and table-model manifests."""
    built = make_default_fixtures(out, seed=seed)
    for family, paths in built.items():
        click.echo(f"{family}: {len(paths.items)} images, manifest {paths.manifest}")


if __name__ == "__main__":
    main()
