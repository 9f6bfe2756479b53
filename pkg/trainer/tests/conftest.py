"""Trainer test helpers plus the trainer acceptance reporter.

Tests marked ``acceptance`` get one [PASS]/[FAIL] line each in the
terminal summary, named after the first line of the test's docstring.
The reporter claims only files in this directory so the grading
engine's suite can run alongside without cross-talk.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

TRAINER_ACCEPTANCE_RESULTS: list[tuple[str, bool]] = []

_SUITE_DIR = Path(__file__).resolve().parent


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "acceptance: criterion-level test reported in the terminal summary"
    )


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    if report.when != "call" or "acceptance" not in item.keywords:
        return
    if Path(str(item.fspath)).resolve().parent != _SUITE_DIR:
        return
    doc = (item.function.__doc__ or item.name).strip().splitlines()[0]
    TRAINER_ACCEPTANCE_RESULTS.append((doc, report.passed))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not TRAINER_ACCEPTANCE_RESULTS:
        return
    terminalreporter.write_sep("=", "trainer acceptance criteria")
    for name, passed in TRAINER_ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {name}")


def write_corpus(root: Path, family: str, grades: list[int], seed: int = 9) -> tuple[Path, Path]:
    """Small labeled corpus with a centered grade marker, strongly learnable.

    Returns (image_dir, labels_csv). The marker square sits in the middle
    of the frame so the training center crop always sees it.
    """
    names = {
        "dr": ("Normal", "Mild", "Moderate", "Severe", "PDR"),
        "dme": ("Grade 0", "Grade 1", "Grade 2"),
    }[family]
    image_dir = root / family / "images"
    image_dir.mkdir(parents=True)
    labels_csv = root / family / "labels.csv"
    rng = np.random.default_rng(seed)
    rows = []
    for i, grade in enumerate(grades):
        arr = rng.integers(0, 256, size=(96, 96, 3), dtype=np.uint8)
        arr[32:64, 32:64] = 20 + 50 * grade
        name = f"t{i:03d}_g{grade}.png"
        Image.fromarray(arr, "RGB").save(image_dir / name)
        rows.append((name, names[grade]))
    with open(labels_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["filename", "label"])
        writer.writerows(rows)
    return image_dir, labels_csv


@pytest.fixture(scope="session")
def dme_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    grades = [0] * 8 + [1] * 5 + [2] * 7
    return write_corpus(root, "dme", grades)


@pytest.fixture(scope="session")
def dr_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    grades = [0] * 5 + [1] * 4 + [2] * 4 + [3] * 4 + [4] * 3
    return write_corpus(root, "dr", grades)
