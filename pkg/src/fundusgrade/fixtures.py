"""Deterministic synthetic fixtures: images, labels, and table-backed models.

Builders here produce a complete runnable setup under one directory: seeded
noise PNGs, a ``labels.csv`` over the final grade names, and a manifest of
table-backend models whose per-image answers are planted to hit an exact
accuracy in their task's class space. Accuracies are given as decimal
strings and resolved with rational arithmetic, so a profile either divides
the image count exactly or is rejected up front; nothing is left to float
rounding.

Planted errors predict ``(truth + 1) % k``. Each profile's ``error_overlap``
controls what share of its errors is drawn from a pool shared by all models
of the same task, which is how correlated mistakes (and therefore losing
majority votes) are staged.
"""

from __future__ import annotations

import csv
import math
import zlib
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
from PIL import Image

from .backends import (
    FINAL_CLASS_SETS,
    TASK_CLASS_SETS,
    family_of_task,
    write_manifest,
)
from .errors import ConfigError
from .evaluation import task_truth

DEFAULT_DR_GRADE_COUNTS = (15, 12, 14, 9, 6)  # 56 images
DEFAULT_DME_GRADE_COUNTS = (19, 5, 20)  # 44 images
MARKER_SIZE = 32


@dataclass(frozen=True)
class ModelProfile:
    """Planted behaviour for one synthetic model.

    accuracy: exact decimal string; fraction of images answered with the
        task-space truth.
    error_overlap: exact decimal string; share of this model's errors drawn
        from the task's shared error pool (floored to whole images).
    """

    model_id: str
    accuracy: str = "1"
    error_overlap: str = "0"

    def __post_init__(self):
        for field_name, value in (("accuracy", self.accuracy), ("error_overlap", self.error_overlap)):
            try:
                frac = Fraction(str(value))
            except (ValueError, ZeroDivisionError):
                raise ConfigError(f"profile '{self.model_id}': bad {field_name} {value!r}")
            if not 0 <= frac <= 1:
                raise ConfigError(
                    f"profile '{self.model_id}': {field_name} {value} outside [0, 1]"
                )


@dataclass(frozen=True)
class FixturePaths:
    """Everything a test or CLI run needs to use one generated fixture."""

    root: Path
    image_dir: Path
    labels_csv: Path
    manifest: Path
    items: tuple[tuple[str, int], ...]  # (filename, final grade index)


def exact_count(fraction: str, total: int, what: str) -> int:
    """fraction * total as an exact integer, rejecting inexact profiles."""
    value = Fraction(str(fraction)) * total
    if value.denominator != 1:
        raise ConfigError(
            f"{what}: {fraction} of {total} images is {float(value):g}, not a whole number"
        )
    return int(value)


def _grade_plan(family: str, grade_counts) -> list[int]:
    names = FINAL_CLASS_SETS[family]
    counts = tuple(int(c) for c in grade_counts)
    if len(counts) != len(names):
        raise ConfigError(f"{family} needs {len(names)} grade counts, got {len(counts)}")
    if any(c < 0 for c in counts) or sum(counts) == 0:
        raise ConfigError(f"grade counts must be non-negative and sum above zero: {counts}")
    plan: list[int] = []
    for grade, count in enumerate(counts):
        plan.extend([grade] * count)
    return plan


def make_images(
    image_dir: str | Path,
    family: str,
    grade_counts,
    seed: int = 2024,
    size: tuple[int, int] = (310, 330),
    prefix: str = "img",
) -> tuple[tuple[str, int], ...]:
    """Write seeded noise PNGs, one per planned grade, plus a grade marker.

    The marker is a corner square whose intensity encodes the grade, so
    files of different grades never collide under content hashing. Returns
    (filename, grade index) pairs in filename order.
    """
    image_dir = Path(image_dir)
    image_dir.mkdir(parents=True, exist_ok=True)
    plan = _grade_plan(family, grade_counts)
    rng = np.random.default_rng(seed)
    h, w = size
    if h < MARKER_SIZE or w < MARKER_SIZE:
        raise ConfigError(f"image size {size} smaller than the {MARKER_SIZE}px grade marker")
    items: list[tuple[str, int]] = []
    for idx, grade in enumerate(plan):
        arr = rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8)
        arr[:MARKER_SIZE, :MARKER_SIZE] = 30 + 40 * grade
        name = f"{prefix}{idx:03d}_g{grade}.png"
        Image.fromarray(arr, "RGB").save(image_dir / name)
        items.append((name, grade))
    return tuple(items)


def write_labels(csv_path: str | Path, items, family: str) -> Path:
    """labels.csv over final grade names for the generated images."""
    names = FINAL_CLASS_SETS[family]
    csv_path = Path(csv_path)
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["filename", "label"])
        for filename, grade in items:
            writer.writerow([filename, names[grade]])
    return csv_path


def _error_sets(
    filenames: list[str],
    profiles: tuple[ModelProfile, ...],
    task: str,
    seed: int,
) -> dict[str, set[str]]:
    """Pick which images each profile answers wrongly.

    One seeded shuffle per task defines an error-proneness order. The front
    of that order is the shared pool; a profile takes floor(overlap * errors)
    images from the pool front and the rest from a region of its own.
    """
    n = len(filenames)
    rng = np.random.default_rng([seed, zlib.crc32(task.encode())])
    order = [filenames[i] for i in rng.permutation(n)]

    error_counts: dict[str, int] = {}
    shared_counts: dict[str, int] = {}
    for profile in profiles:
        correct = exact_count(profile.accuracy, n, f"profile '{profile.model_id}' ({task})")
        errors = n - correct
        shared = math.floor(Fraction(str(profile.error_overlap)) * errors)
        error_counts[profile.model_id] = errors
        shared_counts[profile.model_id] = shared

    pool_size = max(shared_counts.values(), default=0)
    cursor = pool_size
    sets: dict[str, set[str]] = {}
    for profile in profiles:
        errors = error_counts[profile.model_id]
        shared = shared_counts[profile.model_id]
        unique = errors - shared
        if cursor + unique > n:
            raise ConfigError(
                f"profiles for task '{task}' need more distinct error images "
                f"than the {n} available"
            )
        chosen = set(order[:shared]) | set(order[cursor : cursor + unique])
        cursor += unique
        sets[profile.model_id] = chosen
    return sets


def build_table_models(
    task: str,
    items,
    profiles,
    seed: int = 2024,
) -> list[dict]:
    """Manifest stanzas for table models hitting each profile's accuracy.

    Entries map every image filename to the task-space truth, except the
    planted error images, which get the next class round-robin.
    """
    profiles = tuple(profiles)
    if not profiles:
        raise ConfigError(f"no profiles given for task '{task}'")
    ids = [p.model_id for p in profiles]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"duplicate model ids for task '{task}': {ids}")
    k = len(TASK_CLASS_SETS[task])
    filenames = [name for name, _ in items]
    truths = {name: task_truth(task, grade) for name, grade in items}
    errors = _error_sets(filenames, profiles, task, seed)

    models = []
    for profile in profiles:
        wrong = errors[profile.model_id]
        entries = {
            name: (truths[name] + 1) % k if name in wrong else truths[name]
            for name in filenames
        }
        models.append(
            {
                "id": profile.model_id,
                "kind": "table",
                "task": task,
                "config": {"key": "source", "entries": entries},
            }
        )
    return models


def _echo(task_tag: str) -> tuple[ModelProfile, ...]:
    return (ModelProfile(model_id=f"{task_tag}-echo"),)


def _make_family_fixture(
    root: str | Path,
    family: str,
    task_profiles: dict[str, tuple[ModelProfile, ...]],
    grade_counts,
    seed: int,
    image_size: tuple[int, int],
) -> FixturePaths:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    image_dir = root / "images"
    items = make_images(image_dir, family, grade_counts, seed=seed, size=image_size)
    labels_csv = write_labels(root / "labels.csv", items, family)

    models: list[dict] = []
    retained: dict[str, list[str]] = {}
    for task, profiles in task_profiles.items():
        if family_of_task(task) != family:
            raise ConfigError(f"task '{task}' does not belong to family '{family}'")
        stanzas = build_table_models(task, items, profiles, seed=seed)
        models.extend(stanzas)
        retained[task] = [s["id"] for s in stanzas]

    manifest = write_manifest(root / "manifest.json", models, retained=retained)
    return FixturePaths(
        root=root,
        image_dir=image_dir,
        labels_csv=labels_csv,
        manifest=manifest,
        items=items,
    )


def make_dr_fixture(
    root: str | Path,
    primary: tuple[ModelProfile, ...] | None = None,
    expert: tuple[ModelProfile, ...] | None = None,
    grade_counts=DEFAULT_DR_GRADE_COUNTS,
    seed: int = 2024,
    image_size: tuple[int, int] = (310, 330),
) -> FixturePaths:
    """Retinopathy fixture; omitted profiles default to one truth-echo model."""
    return _make_family_fixture(
        root,
        "dr",
        {
            "dr-primary": tuple(primary) if primary else _echo("primary"),
            "dr-expert": tuple(expert) if expert else _echo("expert"),
        },
        grade_counts,
        seed,
        image_size,
    )


def make_dme_fixture(
    root: str | Path,
    m1: tuple[ModelProfile, ...] | None = None,
    m2: tuple[ModelProfile, ...] | None = None,
    grade_counts=DEFAULT_DME_GRADE_COUNTS,
    seed: int = 2024,
    image_size: tuple[int, int] = (310, 330),
) -> FixturePaths:
    """Edema fixture; omitted profiles default to one truth-echo model."""
    return _make_family_fixture(
        root,
        "dme",
        {
            "dme-m1": tuple(m1) if m1 else _echo("m1"),
            "dme-m2": tuple(m2) if m2 else _echo("m2"),
        },
        grade_counts,
        seed,
        image_size,
    )


def make_default_fixtures(root: str | Path, seed: int = 2024) -> dict[str, FixturePaths]:
    """Both family fixtures with three echo models per task, under one root."""
    root = Path(root)

    def trio(tag: str) -> tuple[ModelProfile, ...]:
        return tuple(ModelProfile(model_id=f"{tag}-{i}") for i in range(3))

    return {
        "dr": make_dr_fixture(root / "dr", primary=trio("primary"), expert=trio("expert"), seed=seed),
        "dme": make_dme_fixture(root / "dme", m1=trio("m1"), m2=trio("m2"), seed=seed),
    }
