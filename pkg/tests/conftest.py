"""Shared test helpers plus the acceptance-criteria reporter.

Tests marked ``acceptance`` get one [PASS]/[FAIL] line each in the terminal
summary, named after the first line of the test's docstring.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from fundusgrade.backends import ModelHandle, class_set_for
from fundusgrade.preprocess import DEFAULT_CHANNEL_STATS, RawImage

ACCEPTANCE_RESULTS: list[tuple[str, bool]] = []

# other suites in the repo run their own reporter; only claim our files
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
    ACCEPTANCE_RESULTS.append((doc, report.passed))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for name, passed in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {name}")


def make_stub(model_id: str, task: str, label: int | None = None, scores=None,
              stats=None, single_threaded: bool = False) -> ModelHandle:
    """Stub model answering every crop with a fixed label or score vector."""
    config = {"scores": list(scores)} if scores is not None else {"label": int(label or 0)}
    return ModelHandle(
        id=model_id,
        kind="stub",
        task=task,
        class_set=class_set_for(task),
        channel_stats=stats or DEFAULT_CHANNEL_STATS,
        config=config,
        single_threaded=single_threaded,
    )


def make_table(model_id: str, task: str, entries: dict, default: int | None = None,
               key: str = "source", stats=None) -> ModelHandle:
    """Table model answering from a lookup keyed by source name or checksum."""
    config = {"key": key, "entries": dict(entries)}
    if default is not None:
        config["default"] = int(default)
    return ModelHandle(
        id=model_id,
        kind="table",
        task=task,
        class_set=class_set_for(task),
        channel_stats=stats or DEFAULT_CHANNEL_STATS,
        config=config,
    )


def random_raw(rng: np.random.Generator, h: int = 256, w: int = 256,
               source: str = "random.png") -> RawImage:
    """Seeded random 8-bit RGB image."""
    return RawImage(
        pixels=rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8),
        source=source,
    )
