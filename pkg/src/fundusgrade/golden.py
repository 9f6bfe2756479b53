"""Frozen reference results and their arithmetic self-checks.

The reference confusion matrices for the retinopathy cascade and the edema
grader are embedded here verbatim, together with the headline accuracy each
was reported with. ``run_golden_checks`` recomputes every accuracy from the
raw counts and verifies it lands within a tenth of a percentage point of the
headline figure, which guards the evaluation arithmetic (trace, total,
percentage formatting) against regressions.

Some headline figures circulated alongside these runs disagree with the
matrix arithmetic; those are kept as informational notes on each record and
never fail a check.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backends import ClassSet
from .dme import DME_GRADES
from .dr import DR_GRADES
from .evaluation import ConfusionMatrix

DEFAULT_TOLERANCE_PP = 0.1  # percentage points

_DR_CLASSES = ClassSet(DR_GRADES)
_DME_CLASSES = ClassSet(DME_GRADES)


@dataclass(frozen=True)
class GoldenRecord:
    """One frozen result: matrix counts plus the accuracy it shipped with."""

    name: str
    task: str
    split: str
    counts: tuple[tuple[int, ...], ...]
    reported_accuracy_pct: float
    notes: tuple[str, ...] = ()

    def matrix(self) -> ConfusionMatrix:
        class_set = _DR_CLASSES if self.task == "dr" else _DME_CLASSES
        return ConfusionMatrix(np.array(self.counts, dtype=np.int64), class_set)


GOLDEN_RECORDS: tuple[GoldenRecord, ...] = (
    GoldenRecord(
        name="dr-test",
        task="dr",
        split="test",
        counts=(
            (14, 0, 1, 0, 0),
            (2, 10, 0, 0, 0),
            (1, 0, 11, 2, 0),
            (0, 0, 1, 8, 0),
            (0, 0, 1, 0, 5),
        ),
        reported_accuracy_pct=85.7,
        notes=(
            "other summaries of the same run quote 83.9 and 84.0; "
            "the matrix arithmetic gives 48/56 = 85.71",
        ),
    ),
    GoldenRecord(
        name="dr-train",
        task="dr",
        split="train",
        counts=(
            (127, 0, 6, 1, 0),
            (5, 103, 1, 0, 0),
            (4, 0, 128, 4, 0),
            (0, 0, 8, 65, 1),
            (0, 0, 5, 18, 26),
        ),
        reported_accuracy_pct=89.4,
        notes=("matrix arithmetic gives 449/502 = 89.44",),
    ),
    GoldenRecord(
        name="dme-test",
        task="dme",
        split="test",
        counts=(
            (18, 1, 0),
            (0, 5, 0),
            (0, 1, 19),
        ),
        reported_accuracy_pct=95.45,
        notes=("matrix arithmetic gives 42/44 = 95.45",),
    ),
    GoldenRecord(
        name="dme-train",
        task="dme",
        split="train",
        counts=(
            (172, 5, 0),
            (2, 38, 1),
            (2, 3, 190),
        ),
        reported_accuracy_pct=96.85,
        notes=("matrix arithmetic gives 400/413 = 96.85",),
    ),
)


@dataclass(frozen=True)
class GoldenCheck:
    """Outcome of recomputing one record's accuracy from its counts."""

    record: GoldenRecord
    computed_accuracy_pct: float
    delta_pp: float
    ok: bool

    def line(self) -> str:
        status = "OK" if self.ok else "MISMATCH"
        out = (
            f"[{status}] {self.record.name}: computed {self.computed_accuracy_pct:.2f}% "
            f"vs reported {self.record.reported_accuracy_pct:.2f}% "
            f"(delta {self.delta_pp:+.3f}pp)"
        )
        for note in self.record.notes:
            out += f"\n    note: {note}"
        return out


def check_record(record: GoldenRecord, tolerance_pp: float = DEFAULT_TOLERANCE_PP) -> GoldenCheck:
    computed = record.matrix().accuracy * 100.0
    delta = computed - record.reported_accuracy_pct
    return GoldenCheck(
        record=record,
        computed_accuracy_pct=computed,
        delta_pp=delta,
        ok=abs(delta) <= tolerance_pp,
    )


def run_golden_checks(tolerance_pp: float = DEFAULT_TOLERANCE_PP) -> list[GoldenCheck]:
    """Recompute all embedded reference accuracies against their headlines."""
    return [check_record(record, tolerance_pp) for record in GOLDEN_RECORDS]


def golden_report(tolerance_pp: float = DEFAULT_TOLERANCE_PP) -> tuple[str, bool]:
    """Human-readable check report and the overall verdict."""
    checks = run_golden_checks(tolerance_pp)
    lines = [check.line() for check in checks]
    all_ok = all(check.ok for check in checks)
    lines.append(f"{sum(c.ok for c in checks)}/{len(checks)} reference results verified")
    return "\n".join(lines) + "\n", all_ok
