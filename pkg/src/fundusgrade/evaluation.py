"""Labeled-dataset ingestion, confusion matrices, and accuracy reports."""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Callable

import numpy as np

from .backends import ClassSet, class_set_for, family_of_task, final_class_set
from .errors import ConfigError, FundusGradeError, InvalidInputError

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class LabeledDataset:
    """Image paths with ground-truth label indices."""

    items: tuple[tuple[Path, int], ...]
    class_set: ClassSet
    split: str | None = None

    def __post_init__(self):
        paths = [p for p, _ in self.items]
        if len(set(paths)) != len(paths):
            raise ConfigError("duplicate image paths in dataset")
        for _, label in self.items:
            if not 0 <= label < self.class_set.size:
                raise ConfigError(f"label index {label} outside the class set")
        object.__setattr__(self, "items", tuple(self.items))

    def __len__(self) -> int:
        return len(self.items)


def load_labels(
    csv_path: str | Path,
    class_set: ClassSet,
    image_dir: str | Path | None = None,
    split: str | None = None,
) -> LabeledDataset:
    """Read a ``filename,label[,split]`` CSV into a validated dataset.

    Labels must be class names from the given set; violations are reported
    with their line number. When ``split`` is given the CSV must carry a
    split column, and only matching rows are kept.
    """
    csv_path = Path(csv_path)
    if not csv_path.is_file():
        raise ConfigError(f"labels file not found: {csv_path}")
    base = Path(image_dir) if image_dir is not None else csv_path.parent

    items: list[tuple[Path, int]] = []
    seen: set[str] = set()
    with open(csv_path, newline="") as fh:
        reader = csv.DictReader(fh)
        fields = reader.fieldnames or []
        if "filename" not in fields or "label" not in fields:
            raise ConfigError(f"{csv_path}: header must include 'filename' and 'label'")
        if split is not None and "split" not in fields:
            raise ConfigError(f"{csv_path}: no 'split' column but split '{split}' requested")
        for line, row in enumerate(reader, start=2):
            name = (row["filename"] or "").strip()
            label = (row["label"] or "").strip()
            if not name:
                raise ConfigError(f"{csv_path} line {line}: empty filename")
            if name in seen:
                raise ConfigError(f"{csv_path} line {line}: duplicate filename '{name}'")
            seen.add(name)
            if label not in class_set.labels:
                raise ConfigError(
                    f"{csv_path} line {line}: unknown label '{label}' "
                    f"(expected one of {list(class_set.labels)})"
                )
            if split is not None and (row.get("split") or "").strip() != split:
                continue
            items.append((base / name, class_set.index_of(label)))
    return LabeledDataset(items=tuple(items), class_set=class_set, split=split)


def split_dataset(
    dataset: LabeledDataset,
    fractions: tuple[float, float] = (0.7, 0.2),
    seed: int = 0,
) -> dict[str, LabeledDataset]:
    """Seeded train/val/test split: floor(n * fraction) for train and val,
    the remainder becomes test. 502 items at (0.7, 0.2) split 351/100/51."""
    n = len(dataset.items)
    # exact decimal arithmetic so floor(n * fraction) never loses an item
    # to float rounding (502 at 0.7 must give 351, not 350)
    n_train = math.floor(Fraction(str(fractions[0])) * n)
    n_val = math.floor(Fraction(str(fractions[1])) * n)
    if n_train + n_val > n:
        raise ConfigError(f"split fractions {fractions} exceed the dataset")
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [dataset.items[i] for i in order]
    parts = {
        "train": shuffled[:n_train],
        "val": shuffled[n_train : n_train + n_val],
        "test": shuffled[n_train + n_val :],
    }
    return {
        name: LabeledDataset(items=tuple(items), class_set=dataset.class_set, split=name)
        for name, items in parts.items()
    }


def task_truth(task: str, grade_index: int) -> int:
    """Map a final grade index to the truth index one model task sees.

    Grades at or above Severe collapse into the merged class for the
    four-way task and re-index from zero for the two-way severe split.
    Edema grades map onto the two binary detectors; for images below the
    severe threshold the severe-split truth is pinned to its first class.
    """
    if task == "dr-primary":
        return min(grade_index, 3)
    if task == "dr-expert":
        return grade_index - 3 if grade_index >= 3 else 0
    if task == "dme-m1":
        return 0 if grade_index == 0 else 1
    if task == "dme-m2":
        return 1 if grade_index == 2 else 0
    raise ConfigError(f"unknown task '{task}'")


def task_view(dataset: LabeledDataset, task: str) -> LabeledDataset:
    """Re-label a final-grade dataset into one task's class space."""
    expected = final_class_set(family_of_task(task))
    if dataset.class_set.labels != expected.labels:
        raise ConfigError(
            f"task '{task}' needs labels over {expected.labels}, "
            f"dataset uses {dataset.class_set.labels}"
        )
    items = tuple((path, task_truth(task, grade)) for path, grade in dataset.items)
    return LabeledDataset(items=items, class_set=class_set_for(task), split=dataset.split)


def task_dataset(dataset: LabeledDataset, task: str) -> LabeledDataset:
    """The benchmark dataset for one task.

    Like ``task_view``, except the severe-split task only sees images at or
    above the severe threshold; its truth is undefined below it.
    """
    if task == "dr-expert":
        keep = tuple((path, grade) for path, grade in dataset.items if grade >= 3)
        if not keep:
            raise InvalidInputError("no images at or above the severe threshold")
        dataset = LabeledDataset(items=keep, class_set=dataset.class_set, split=dataset.split)
    return task_view(dataset, task)


@dataclass(frozen=True)
class ConfusionMatrix:
    """K x K count grid; rows are truth, columns are prediction."""

    counts: np.ndarray
    class_set: ClassSet

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        k = self.class_set.size
        if counts.shape != (k, k):
            raise InvalidInputError(f"expected a {k}x{k} matrix, got {counts.shape}")
        if (counts < 0).any():
            raise InvalidInputError("confusion counts must be non-negative")
        object.__setattr__(self, "counts", counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def correct(self) -> int:
        return int(np.trace(self.counts))

    @property
    def accuracy(self) -> float:
        if self.total == 0:
            return 0.0
        return self.correct / self.total

    def merged(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.class_set.labels != self.class_set.labels:
            raise InvalidInputError("cannot merge matrices over different class sets")
        return ConfusionMatrix(self.counts + other.counts, self.class_set)

    def to_text(self) -> str:
        labels = self.class_set.labels
        width = max(len(name) for name in labels) + 2
        lines = [
            "rows: truth, columns: prediction",
            " " * width + "".join(f"{name:>{width}}" for name in labels),
        ]
        for i, name in enumerate(labels):
            row = "".join(f"{int(c):>{width}}" for c in self.counts[i])
            lines.append(f"{name:<{width}}{row}")
        lines.append(f"Accuracy = {self.accuracy * 100:.2f}%")
        return "\n".join(lines) + "\n"

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["truth\\prediction", *self.class_set.labels])
            for i, name in enumerate(self.class_set.labels):
                writer.writerow([name, *(int(c) for c in self.counts[i])])
        return path


def confusion(preds, truths, class_set: ClassSet) -> ConfusionMatrix:
    """Count (truth, prediction) pairs into a matrix."""
    preds = list(preds)
    truths = list(truths)
    if len(preds) != len(truths):
        raise InvalidInputError(
            f"got {len(preds)} predictions for {len(truths)} truth labels"
        )
    k = class_set.size
    counts = np.zeros((k, k), dtype=np.int64)
    for truth, pred in zip(truths, preds):
        if not (0 <= truth < k and 0 <= pred < k):
            raise InvalidInputError(f"label pair ({truth}, {pred}) outside [0, {k})")
        counts[truth, pred] += 1
    return ConfusionMatrix(counts=counts, class_set=class_set)


@dataclass(frozen=True)
class EvalResult:
    matrix: ConfusionMatrix
    records: tuple[tuple[str, int, int], ...]  # (filename, truth, prediction)
    skipped: tuple[tuple[str, str], ...]  # (filename, reason)

    def write_log(self, path: str | Path) -> Path:
        labels = self.matrix.class_set.labels
        path = Path(path)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["filename", "truth", "prediction", "error"])
            for name, truth, pred in self.records:
                writer.writerow([name, labels[truth], labels[pred], ""])
            for name, reason in self.skipped:
                writer.writerow([name, "", "", reason])
        return path


def evaluate(
    label_fn: Callable[[Path], int],
    dataset: LabeledDataset,
    workers: int = 1,
) -> EvalResult:
    """Run a grading callable over a dataset and tabulate its confusion.

    Items are processed independently (optionally in parallel); the result
    is invariant to item order and worker count. Per-item failures are
    skipped and accounted for, never fatal unless everything fails.
    """
    if not dataset.items:
        raise InvalidInputError("dataset is empty")

    def work(item):
        path, truth = item
        return Path(path).name, truth, label_fn(Path(path))

    records: list[tuple[str, int, int]] = []
    skipped: list[tuple[str, str]] = []
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = {pool.submit(work, item): item for item in dataset.items}
            for future, item in futures.items():
                try:
                    records.append(future.result())
                except ConfigError:
                    raise
                except FundusGradeError as exc:
                    log.warning("skipping %s: %s", item[0], exc)
                    skipped.append((Path(item[0]).name, str(exc)))
    else:
        for item in dataset.items:
            try:
                records.append(work(item))
            except ConfigError:
                raise
            except FundusGradeError as exc:
                log.warning("skipping %s: %s", item[0], exc)
                skipped.append((Path(item[0]).name, str(exc)))

    if not records:
        raise InvalidInputError("no dataset image could be evaluated")
    records.sort(key=lambda r: r[0])
    skipped.sort(key=lambda r: r[0])
    matrix = confusion(
        [pred for _, _, pred in records],
        [truth for _, truth, _ in records],
        dataset.class_set,
    )
    return EvalResult(matrix=matrix, records=tuple(records), skipped=tuple(skipped))
