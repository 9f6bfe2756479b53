"""Diabetic macular edema grading.

Two binary ensembles always run on the same crops: one detects exudates at
all, the other detects the advanced grade. A fixed four-row rule table maps
the flag pair to a final grade in {Grade 0, Grade 1, Grade 2}. The
contradictory pair (no exudates, yet advanced) still resolves to Grade 2 but
is counted and logged, since it signals disagreement between the two models.
"""

from __future__ import annotations

import csv
import logging
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from .backends import FINAL_CLASS_SETS
from .ensemble import EnsembleSpec, VoteRecord, ensemble_votes
from .errors import ConfigError, FundusGradeError
from .preprocess import (
    RESIZE_FOR_CROPS,
    RawImage,
    center_crop_set,
    load_image,
    resize_bilinear,
    ten_crop,
)

log = logging.getLogger(__name__)

DME_GRADES = FINAL_CLASS_SETS["dme"]

# (exudates_absent, advanced) -> (case number, final grade index)
DECISION_TABLE: dict[tuple[bool, bool], tuple[int, int]] = {
    (True, False): (1, 0),
    (False, True): (2, 2),
    (False, False): (3, 1),
    (True, True): (4, 2),
}

CONTRADICTION_CASE = 4

REPORT_COLUMNS = ("filename", "grade", "case", "exudates_absent", "advanced", "error")


def decision_table(exudates_absent: bool, advanced: bool) -> tuple[int, int]:
    """Map the two binary flags to (case number, grade index)."""
    return DECISION_TABLE[(bool(exudates_absent), bool(advanced))]


@dataclass(frozen=True)
class DMEDecision:
    """Final three-grade decision with both model outputs attached."""

    grade_index: int
    case: int
    exudates_absent: bool
    advanced: bool
    m1_votes: tuple[VoteRecord, ...]
    m2_votes: tuple[VoteRecord, ...]

    @property
    def grade(self) -> str:
        return DME_GRADES[self.grade_index]

    @property
    def contradiction(self) -> bool:
        return self.case == CONTRADICTION_CASE


def _check_tasks(m1: EnsembleSpec, m2: EnsembleSpec) -> None:
    if m1.task != "dme-m1":
        raise ConfigError(f"first ensemble has task '{m1.task}', expected 'dme-m1'")
    if m2.task != "dme-m2":
        raise ConfigError(f"second ensemble has task '{m2.task}', expected 'dme-m2'")


def grade_dme(
    img: RawImage,
    m1: EnsembleSpec,
    m2: EnsembleSpec,
    tencrop: bool = True,
) -> DMEDecision:
    """Grade one image: run both binary ensembles, then apply the rule table.

    m1 votes class 0 for "no exudates present", m2 votes class 1 for the
    advanced grade. Both ensembles see identical crops.
    """
    _check_tasks(m1, m2)
    resized = resize_bilinear(img, RESIZE_FOR_CROPS, RESIZE_FOR_CROPS)
    crops = ten_crop(resized) if tencrop else center_crop_set(resized)
    cache: dict = {}
    m1_label, m1_votes = ensemble_votes(m1, crops, cache)
    m2_label, m2_votes = ensemble_votes(m2, crops, cache)
    exudates_absent = m1_label == 0
    advanced = m2_label == 1
    case, grade_index = decision_table(exudates_absent, advanced)
    if case == CONTRADICTION_CASE:
        log.warning(
            "contradictory flags for %s: no exudates detected but advanced grade voted; "
            "resolving to %s",
            img.source,
            DME_GRADES[grade_index],
        )
    return DMEDecision(
        grade_index=grade_index,
        case=case,
        exudates_absent=exudates_absent,
        advanced=advanced,
        m1_votes=m1_votes,
        m2_votes=m2_votes,
    )


@dataclass(frozen=True)
class DMEBatchSummary:
    """Per-grade histogram plus the contradiction count for one batch."""

    total: int
    grade_counts: dict[str, int]
    contradictions: int
    errors: int

    def lines(self) -> list[str]:
        out = [f"graded {self.total - self.errors}/{self.total} images"]
        for name, count in self.grade_counts.items():
            out.append(f"  {name}: {count}")
        out.append(f"  contradictory flag pairs: {self.contradictions}")
        if self.errors:
            out.append(f"  failed: {self.errors}")
        return out


def grade_dme_batch(
    image_dir: str | Path,
    m1: EnsembleSpec,
    m2: EnsembleSpec,
    out_csv: str | Path,
    tencrop: bool = True,
    workers: int = 1,
) -> DMEBatchSummary:
    """Grade a directory of images into a CSV report, ordered by filename."""
    from .dr import list_images

    _check_tasks(m1, m2)
    paths = list_images(image_dir)
    results: dict[str, tuple] = {}
    # list.append is atomic, so worker threads can mark contradictions without a lock
    contradiction_marks: list[int] = []

    def run_one(path: Path) -> None:
        try:
            decision = grade_dme(load_image(path), m1, m2, tencrop=tencrop)
        except ConfigError:
            raise
        except FundusGradeError as exc:
            log.warning("failed to grade %s: %s", path.name, exc)
            results[path.name] = (path.name, "", "", "", "", str(exc))
            return
        if decision.contradiction:
            contradiction_marks.append(1)
        results[path.name] = (
            path.name,
            decision.grade,
            str(decision.case),
            str(decision.exudates_absent).lower(),
            str(decision.advanced).lower(),
            "",
        )

    if workers > 1 and paths:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for future in [pool.submit(run_one, p) for p in paths]:
                future.result()
    else:
        for path in paths:
            run_one(path)

    contradictions = len(contradiction_marks)
    grade_counts: Counter = Counter()
    errors = 0
    rows = []
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
    counts = {name: grade_counts.get(name, 0) for name in DME_GRADES}
    return DMEBatchSummary(
        total=len(paths),
        grade_counts=counts,
        contradictions=contradictions,
        errors=errors,
    )


def dme_label_fn(m1: EnsembleSpec, m2: EnsembleSpec, tencrop: bool = True):
    """Adapter for evaluation: path -> three-grade index."""
    _check_tasks(m1, m2)

    def label(path: Path) -> int:
        return grade_dme(load_image(path), m1, m2, tencrop=tencrop).grade_index

    return label
