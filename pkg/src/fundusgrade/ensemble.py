"""Two-level max voting and benchmark-based ensemble pruning.

Level one: each model votes over the crops of one image (modal label).
Level two: the retained models' labels are voted the same way. Ties break
to the lowest class index at both levels; with the ordinal grade sets used
here that is the least-severe grade, which the CLI calls out.

Pruning scores every member by its true-positive count on a validation
set, anchors on the best member (the benchmark), and retains every model
within ``ceil(factor * benchmark_tp)`` true positives. The threshold is
computed in exact decimal arithmetic so 0.95 * 40 is 38, never 39.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from .backends import Manifest, ModelHandle, predict
from .errors import BackendError, ConfigError, InvalidInputError
from .evaluation import LabeledDataset
from .preprocess import (
    RESIZE_FOR_CROPS,
    CropSet,
    center_crop_set,
    load_image,
    resize_bilinear,
    standardize,
    ten_crop,
)

log = logging.getLogger(__name__)

THRESHOLD_RULE = "threshold = ceil(factor * benchmark true positives)"


@dataclass(frozen=True)
class EnsembleSpec:
    """Ordered members of one task's ensemble plus its pruning state."""

    members: tuple[ModelHandle, ...]
    task: str
    pruned: bool = False
    retained_ids: tuple[str, ...] = ()

    def __post_init__(self):
        ids = [m.id for m in self.members]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate model ids in ensemble: {ids}")
        unknown = [r for r in self.retained_ids if r not in ids]
        if unknown:
            raise ConfigError(f"retained ids {unknown} are not ensemble members")
        if self.pruned and not self.retained_ids:
            raise ConfigError("a pruned ensemble must retain at least one model")
        for m in self.members:
            if m.task != self.task:
                raise ConfigError(
                    f"model '{m.id}' has task '{m.task}', ensemble expects '{self.task}'"
                )
        object.__setattr__(self, "members", tuple(self.members))
        object.__setattr__(self, "retained_ids", tuple(self.retained_ids))

    @property
    def class_count(self) -> int:
        return self.members[0].class_set.size

    def retained_members(self) -> tuple[ModelHandle, ...]:
        wanted = set(self.retained_ids)
        return tuple(m for m in self.members if m.id in wanted)

    def with_retained(self, ids) -> "EnsembleSpec":
        return replace(self, pruned=True, retained_ids=tuple(ids))

    def with_all_retained(self) -> "EnsembleSpec":
        return self.with_retained(m.id for m in self.members)

    @classmethod
    def from_manifest(cls, manifest: Manifest, task: str) -> "EnsembleSpec":
        members = manifest.for_task(task)
        if not members:
            raise ConfigError(f"manifest declares no models for task '{task}'")
        retained = manifest.retained.get(task)
        if retained:
            return cls(members=members, task=task, pruned=True, retained_ids=tuple(retained))
        return cls(members=members, task=task)


@dataclass(frozen=True)
class VoteRecord:
    """One model's crop-level labels and the resulting modal label."""

    model_id: str
    per_crop_labels: tuple[int, ...]
    tally: tuple[int, ...]
    model_label: int


@dataclass(frozen=True)
class PruneReport:
    task: str
    benchmark_id: str
    benchmark_tp: int
    threshold_factor: str
    threshold: int
    per_model_tp: dict[str, int]
    retained: tuple[str, ...]
    evaluated: int
    skipped: int
    rule: str = THRESHOLD_RULE

    def to_json(self) -> str:
        doc = {
            "task": self.task,
            "rule": self.rule,
            "threshold_factor": self.threshold_factor,
            "benchmark_model": self.benchmark_id,
            "benchmark_true_positives": self.benchmark_tp,
            "threshold": self.threshold,
            "true_positives": self.per_model_tp,
            "retained": list(self.retained),
            "images_evaluated": self.evaluated,
            "images_skipped": self.skipped,
        }
        return json.dumps(doc, indent=2) + "\n"

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(self.to_json())
        return path


def vote(labels, k: int) -> int:
    """Modal label of a nonempty list; ties break to the lowest class index."""
    labels = list(labels)
    if not labels:
        raise InvalidInputError("cannot vote over an empty label list")
    arr = np.asarray(labels, dtype=np.intp)
    if arr.min() < 0 or arr.max() >= k:
        raise InvalidInputError(f"labels must lie in [0, {k}), got {labels}")
    tally = np.bincount(arr, minlength=k)
    return int(np.argmax(tally))


def _standardized_crops(model: ModelHandle, crops: CropSet, cache: dict | None):
    key = (model.channel_stats.mean, model.channel_stats.std)
    if cache is not None and key in cache:
        return cache[key]
    prepared = tuple(standardize(c, model.channel_stats) for c in crops.crops)
    if cache is not None:
        cache[key] = prepared
    return prepared


def model_vote(model: ModelHandle, crops: CropSet, cache: dict | None = None) -> VoteRecord:
    """Vote one model over a crop set.

    Crops are standardized with the model's own channel stats; the optional
    cache (keyed by stats) lets an ensemble share that work. A cache must
    never be reused across different crop sets.
    """
    k = model.class_set.size
    labels: list[int] = []
    for index, crop in enumerate(_standardized_crops(model, crops, cache)):
        try:
            labels.append(predict(model, crop).label)
        except BackendError as exc:
            raise BackendError(model.id, f"crop {index}: {exc}") from exc
    tally = np.bincount(np.asarray(labels, dtype=np.intp), minlength=k)
    return VoteRecord(
        model_id=model.id,
        per_crop_labels=tuple(labels),
        tally=tuple(int(t) for t in tally),
        model_label=vote(labels, k),
    )


def ensemble_votes(
    spec: EnsembleSpec, crops: CropSet, cache: dict | None = None
) -> tuple[int, tuple[VoteRecord, ...]]:
    """Second-level vote across the retained members; returns both the
    winning label and the per-model vote records."""
    if not spec.pruned:
        raise ConfigError(
            f"ensemble for task '{spec.task}' is not pruned; run pruning first "
            "or retain all members explicitly"
        )
    members = spec.retained_members()
    if not members:
        raise ConfigError(f"ensemble for task '{spec.task}' retains no models")
    if cache is None:
        cache = {}
    records = tuple(model_vote(m, crops, cache) for m in members)
    label = vote([r.model_label for r in records], spec.class_count)
    return label, records


def ensemble_vote(spec: EnsembleSpec, crops: CropSet, cache: dict | None = None) -> int:
    return ensemble_votes(spec, crops, cache)[0]


def exact_threshold(factor: float | str, benchmark_tp: int) -> int:
    """ceil(factor * benchmark_tp) with the factor read as exact decimal."""
    frac = Fraction(str(factor))
    if not 0 <= frac <= 1:
        raise ConfigError(f"threshold factor must lie in [0, 1], got {factor}")
    return math.ceil(frac * benchmark_tp)


def _image_votes(path: Path, members, tencrop: bool) -> dict[str, int]:
    img = load_image(path)
    resized = resize_bilinear(img, RESIZE_FOR_CROPS, RESIZE_FOR_CROPS)
    crops = ten_crop(resized) if tencrop else center_crop_set(resized)
    cache: dict = {}
    return {m.id: model_vote(m, crops, cache).model_label for m in members}


def prune(
    spec: EnsembleSpec,
    validation: LabeledDataset,
    threshold_factor: float | str = "0.95",
    tencrop: bool = True,
    workers: int = 1,
) -> PruneReport:
    """Benchmark-based pruning over a labeled validation set.

    Per-model true positives are counted with the same crop-level voting
    used at inference. Unreadable images are skipped with a warning; the
    run fails only if nothing could be evaluated.
    """
    if not validation.items:
        raise InvalidInputError("validation dataset is empty")
    if validation.class_set.size != spec.class_count:
        raise ConfigError(
            f"validation set has {validation.class_set.size} classes, ensemble "
            f"for '{spec.task}' expects {spec.class_count}"
        )
    members = spec.members
    tp = {m.id: 0 for m in members}
    skipped = 0
    evaluated = 0

    def work(item):
        path, truth = item
        return path, truth, _image_votes(Path(path), members, tencrop)

    results = []
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(work, item) for item in validation.items]
            for future in futures:
                try:
                    results.append(future.result())
                except InvalidInputError as exc:
                    log.warning("skipping validation image: %s", exc)
                    skipped += 1
    else:
        for item in validation.items:
            try:
                results.append(work(item))
            except InvalidInputError as exc:
                log.warning("skipping validation image: %s", exc)
                skipped += 1

    for _path, truth, votes in results:
        evaluated += 1
        for model_id, label in votes.items():
            if label == truth:
                tp[model_id] += 1

    if evaluated == 0:
        raise InvalidInputError("no validation image could be evaluated")

    benchmark_id = max(tp, key=lambda m: tp[m])  # insertion order breaks ties
    benchmark_tp = tp[benchmark_id]
    threshold = exact_threshold(threshold_factor, benchmark_tp)
    retained = [m.id for m in members if tp[m.id] >= threshold or m.id == benchmark_id]
    return PruneReport(
        task=spec.task,
        benchmark_id=benchmark_id,
        benchmark_tp=benchmark_tp,
        threshold_factor=str(threshold_factor),
        threshold=threshold,
        per_model_tp=tp,
        retained=tuple(retained),
        evaluated=evaluated,
        skipped=skipped,
    )
