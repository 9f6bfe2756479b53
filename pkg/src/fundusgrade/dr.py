"""Hierarchical diabetic retinopathy grading.

A pruned primary ensemble assigns one of four classes (Normal, Mild,
Moderate, or the merged severe class S-(N)-PDR). Images landing in the
merged class are routed to a pruned expert ensemble that splits them into
Severe or PDR. Both stages vote over the same preprocessed crops of the
image; the merged class never appears in final output.
"""

from __future__ import annotations

import csv
import logging
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from .backends import FINAL_CLASS_SETS, TASK_CLASS_SETS
from .ensemble import EnsembleSpec, VoteRecord, ensemble_votes
from .errors import ConfigError, FundusGradeError, InvalidInputError
from .preprocess import (
    RESIZE_FOR_CROPS,
    RawImage,
    center_crop_set,
    load_image,
    resize_bilinear,
    ten_crop,
)

log = logging.getLogger(__name__)

DR_GRADES = FINAL_CLASS_SETS["dr"]
PRIMARY_CLASSES = TASK_CLASS_SETS["dr-primary"]
EXPERT_CLASSES = TASK_CLASS_SETS["dr-expert"]
MERGED_SEVERE = 3  # primary index that triggers expert routing

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")

REPORT_COLUMNS = ("filename", "grade", "routed_to_expert", "primary_votes", "expert_votes", "error")


@dataclass(frozen=True)
class DRDecision:
    """Final five-class grade with the votes that produced it."""

    grade_index: int
    routed_to_expert: bool
    primary_votes: tuple[VoteRecord, ...]
    expert_votes: tuple[VoteRecord, ...] | None

    def __post_init__(self):
        if not 0 <= self.grade_index < len(DR_GRADES):
            raise InvalidInputError(f"grade index {self.grade_index} outside the grade set")
        if self.routed_to_expert != (self.expert_votes is not None):
            raise InvalidInputError("expert votes must be present exactly when routed")

    @property
    def grade(self) -> str:
        return DR_GRADES[self.grade_index]


def _check_tasks(primary: EnsembleSpec, expert: EnsembleSpec) -> None:
    if primary.task != "dr-primary":
        raise ConfigError(f"primary ensemble has task '{primary.task}', expected 'dr-primary'")
    if expert.task != "dr-expert":
        raise ConfigError(f"expert ensemble has task '{expert.task}', expected 'dr-expert'")


def grade_dr(
    img: RawImage,
    primary: EnsembleSpec,
    expert: EnsembleSpec,
    tencrop: bool = True,
) -> DRDecision:
    """Grade one fundus image through the primary/expert cascade.

    The expert stage reuses the primary stage's crops byte for byte, so a
    grade is a pure function of the image and the two manifests.
    """
    _check_tasks(primary, expert)
    resized = resize_bilinear(img, RESIZE_FOR_CROPS, RESIZE_FOR_CROPS)
    crops = ten_crop(resized) if tencrop else center_crop_set(resized)
    cache: dict = {}
    primary_label, primary_votes = ensemble_votes(primary, crops, cache)
    if primary_label != MERGED_SEVERE:
        return DRDecision(
            grade_index=primary_label,
            routed_to_expert=False,
            primary_votes=primary_votes,
            expert_votes=None,
        )
    expert_label, expert_votes = ensemble_votes(expert, crops, cache)
    return DRDecision(
        grade_index=MERGED_SEVERE + expert_label,
        routed_to_expert=True,
        primary_votes=primary_votes,
        expert_votes=expert_votes,
    )


def list_images(image_dir: str | Path) -> list[Path]:
    """Decodable image files in a directory, sorted by name."""
    image_dir = Path(image_dir)
    if not image_dir.is_dir():
        raise ConfigError(f"image directory not found: {image_dir}")
    return sorted(
        (p for p in image_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES),
        key=lambda p: p.name,
    )


def _format_votes(records: tuple[VoteRecord, ...] | None, class_names) -> str:
    if records is None:
        return ""
    return "|".join(f"{r.model_id}={class_names[r.model_label]}" for r in records)


@dataclass(frozen=True)
class BatchSummary:
    """Per-grade histogram of one batch run."""

    total: int
    grade_counts: dict[str, int]
    errors: int

    def lines(self) -> list[str]:
        out = [f"graded {self.total - self.errors}/{self.total} images"]
        for name, count in self.grade_counts.items():
            out.append(f"  {name}: {count}")
        if self.errors:
            out.append(f"  failed: {self.errors}")
        return out


def grade_dr_batch(
    image_dir: str | Path,
    primary: EnsembleSpec,
    expert: EnsembleSpec,
    out_csv: str | Path,
    tencrop: bool = True,
    workers: int = 1,
) -> BatchSummary:
    """Grade a directory of images into a CSV report.

    Rows are ordered by filename no matter how the work was scheduled;
    decode failures become rows with an error message instead of aborting
    the batch.
    """
    _check_tasks(primary, expert)
    paths = list_images(image_dir)

    def work(path: Path):
        return grade_dr(load_image(path), primary, expert, tencrop=tencrop)

    rows: list[tuple] = []
    grade_counts: Counter = Counter()
    errors = 0
    results: dict[str, tuple] = {}

    def record(path: Path, decision: DRDecision | None, error: str) -> None:
        if decision is None:
            results[path.name] = (path.name, "", "", "", "", error)
        else:
            results[path.name] = (
                path.name,
                decision.grade,
                str(decision.routed_to_expert).lower(),
                _format_votes(decision.primary_votes, PRIMARY_CLASSES),
                _format_votes(decision.expert_votes, EXPERT_CLASSES),
                "",
            )

    def run_one(path: Path) -> None:
        try:
            record(path, work(path), "")
        except ConfigError:
            raise
        except FundusGradeError as exc:
            log.warning("failed to grade %s: %s", path.name, exc)
            record(path, None, str(exc))

    if workers > 1 and paths:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for future in [pool.submit(run_one, p) for p in paths]:
                future.result()
    else:
        for path in paths:
            run_one(path)

    for name in sorted(results):
        row = results[name]
        rows.append(row)
        if row[1]:
            grade_counts[row[1]] += 1
        else:
            errors += 1

    out_csv = Path(out_csv)
    with open(out_csv, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        writer.writerows(rows)
    counts = {name: grade_counts.get(name, 0) for name in DR_GRADES}
    return BatchSummary(total=len(paths), grade_counts=counts, errors=errors)


def dr_label_fn(primary: EnsembleSpec, expert: EnsembleSpec, tencrop: bool = True):
    """Adapter for evaluation: path -> five-class grade index."""
    _check_tasks(primary, expert)

    def label(path: Path) -> int:
        return grade_dr(load_image(path), primary, expert, tencrop=tencrop).grade_index

    return label
