"""Label loading, task relabeling, splits, and the training dataset.

The labels CSV is the same format the grading engine consumes: a
``filename`` column plus a ``label`` column holding the family's final
grade name. Every model task trains on a view of those grades:

* ``dr-primary`` folds the two worst retinopathy grades into one class,
  so grade g becomes min(g, 3) over all images.
* ``dr-expert`` keeps only images at grade 3 or worse and relabels them
  to {0, 1}.
* ``dme-m1`` learns exudate presence: 0 stays 0, everything else is 1.
* ``dme-m2`` learns the worst edema grade: 2 maps to 1, the rest to 0.
"""

from __future__ import annotations

import csv
from fractions import Fraction
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from PIL import Image
from torch.utils.data import Dataset

from .errors import ConfigError

FAMILY_GRADES: dict[str, tuple[str, ...]] = {
    "dr": ("Normal", "Mild", "Moderate", "Severe", "PDR"),
    "dme": ("Grade 0", "Grade 1", "Grade 2"),
}

TASK_FAMILY: dict[str, str] = {
    "dr-primary": "dr",
    "dr-expert": "dr",
    "dme-m1": "dme",
    "dme-m2": "dme",
}

# grade index in, class index out, or None to drop the row
_SURGERY: dict[str, Callable[[int], int | None]] = {
    "dr-primary": lambda g: min(g, 3),
    "dr-expert": lambda g: g - 3 if g >= 3 else None,
    "dme-m1": lambda g: 0 if g == 0 else 1,
    "dme-m2": lambda g: 1 if g == 2 else 0,
}

Example = tuple[str, int]

RESIZE_SIZE = 256
INPUT_SIZE = 224

DEFAULT_CHANNEL_MEAN = (0.485, 0.456, 0.406)
DEFAULT_CHANNEL_STD = (0.229, 0.224, 0.225)


def read_labels(csv_path: str | Path, family: str) -> list[Example]:
    """Read (filename, grade index) rows for one disease family."""
    if family not in FAMILY_GRADES:
        raise ConfigError(f"unknown family '{family}' (expected one of {sorted(FAMILY_GRADES)})")
    grades = FAMILY_GRADES[family]
    index = {name: i for i, name in enumerate(grades)}
    path = Path(csv_path)
    if not path.is_file():
        raise ConfigError(f"labels file not found: {path}")
    rows: list[Example] = []
    seen: set[str] = set()
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        if "filename" not in header or "label" not in header:
            raise ConfigError(f"{path}: header must include 'filename' and 'label'")
        for lineno, row in enumerate(reader, start=2):
            filename = (row["filename"] or "").strip()
            label = (row["label"] or "").strip()
            if not filename:
                raise ConfigError(f"{path} line {lineno}: empty filename")
            if filename in seen:
                raise ConfigError(f"{path} line {lineno}: duplicate filename '{filename}'")
            if label not in index:
                raise ConfigError(
                    f"{path} line {lineno}: unknown label '{label}' "
                    f"(expected one of {list(grades)})"
                )
            seen.add(filename)
            rows.append((filename, index[label]))
    if not rows:
        raise ConfigError(f"{path}: no labeled rows")
    return rows


def task_examples(rows: Sequence[Example], task: str) -> list[Example]:
    """Apply the task's label surgery; order is preserved."""
    if task not in _SURGERY:
        raise ConfigError(f"unknown task '{task}' (expected one of {sorted(_SURGERY)})")
    out: list[Example] = []
    for filename, grade in rows:
        relabeled = _SURGERY[task](grade)
        if relabeled is not None:
            out.append((filename, relabeled))
    if not out:
        raise ConfigError(f"no examples left for task '{task}' after relabeling")
    return out


def split_70_20(rows: Sequence[Example], seed: int = 0) -> tuple[list[Example], list[Example]]:
    """Shuffle and split into 70% train / 20% val; the rest is held out.

    Sizes are floor(n * 7/10) and floor(n * 2/10) computed in exact
    rational arithmetic, so 502 rows give 351 train and 100 val.
    """
    n = len(rows)
    n_train = int(Fraction(n) * Fraction(7, 10))
    n_val = int(Fraction(n) * Fraction(2, 10))
    if n_train < 1 or n_val < 1:
        raise ConfigError(f"need at least 5 examples to split 70/20, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    train = [rows[i] for i in order[:n_train]]
    val = [rows[i] for i in order[n_train:n_train + n_val]]
    return train, val


def load_input(path: str | Path,
               mean: Sequence[float] = DEFAULT_CHANNEL_MEAN,
               std: Sequence[float] = DEFAULT_CHANNEL_STD) -> np.ndarray:
    """Decode one image into a standardized (3, 224, 224) float32 array.

    Bilinear resize to 256, center crop to the input size, min-max to
    [0, 1] (a constant crop becomes zeros), then per-channel
    standardization: the grading engine's center-crop path, so training
    sees the same pixels inference will. Training skips the ten-crop
    scheme; crops are an inference-time vote.
    """
    try:
        with Image.open(path) as img:
            rgb = img.convert("RGB").resize((RESIZE_SIZE, RESIZE_SIZE), Image.BILINEAR)
    except Exception as exc:
        raise ConfigError(f"cannot decode image '{path}': {exc}") from exc
    offset = (RESIZE_SIZE - INPUT_SIZE) // 2
    pixels = np.asarray(rgb, dtype=np.float32)[
        offset:offset + INPUT_SIZE, offset:offset + INPUT_SIZE
    ]
    low, high = float(pixels.min()), float(pixels.max())
    if high > low:
        pixels = (pixels - low) / (high - low)
    else:
        pixels = np.zeros_like(pixels)
    pixels = (pixels - np.asarray(mean, dtype=np.float32)) / np.asarray(std, dtype=np.float32)
    return np.ascontiguousarray(pixels.transpose(2, 0, 1))


class FundusDataset(Dataset):
    """Examples as (standardized image tensor, class index) pairs."""

    def __init__(self, examples: Sequence[Example], image_dir: str | Path,
                 mean: Sequence[float] = DEFAULT_CHANNEL_MEAN,
                 std: Sequence[float] = DEFAULT_CHANNEL_STD) -> None:
        self.examples = list(examples)
        self.image_dir = Path(image_dir)
        self.mean = tuple(float(v) for v in mean)
        self.std = tuple(float(v) for v in std)
        if not self.examples:
            raise ConfigError("dataset needs at least one example")

    def __len__(self) -> int:
        return len(self.examples)

    def __getitem__(self, i: int) -> tuple[torch.Tensor, int]:
        filename, label = self.examples[i]
        arr = load_input(self.image_dir / filename, self.mean, self.std)
        return torch.from_numpy(arr), label
