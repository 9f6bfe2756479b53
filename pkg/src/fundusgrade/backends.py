"""Classifier backends behind a uniform predict() interface.

A manifest (JSON) declares the models of every grading task. Three backend
kinds exist:

* ``stub``: returns a fixed score vector regardless of input; makes every
  pipeline executable with zero trained weights.
* ``table``: looks predictions up by the input's source tag (optionally
  per crop) or by a checksum of the tensor bytes; test oriented.
* ``onnx-file``: runs an exported inference graph (one 1x3x224x224 image
  input, one 1xK score output) through the built-in numpy executor.

Manifest schema::

    {
      "channel_stats": {"mean": [r,g,b], "std": [r,g,b]},   # optional default
      "models": [
        {
          "id": "resnet34",            # unique within the manifest
          "kind": "onnx-file",         # or "stub" / "table"
          "task": "dr-primary",        # fixes the class set, see TASK_CLASS_SETS
          "path": "models/resnet34.onnx",   # onnx-file only, relative to manifest
          "config": {...},             # stub/table only, see below
          "class_set": ["Normal", ...],     # optional; must match the task
          "channel_stats": {...},      # optional per-model override
          "single_threaded": false     # serialize calls to this backend
        }
      ],
      "retained": {"dr-primary": ["resnet34", ...]}    # written by pruning
    }

Stub config: ``{"label": 2}`` or ``{"scores": [0.1, 0.7, 0.1, 0.1]}``.
Table config: ``{"key": "source"|"checksum", "entries": {...}, "default": 0}``
where entries map a key to a class label or to a per-crop list of labels.
Scores are raw, not necessarily normalized; voting only ever uses argmax.
"""

from __future__ import annotations

import hashlib
import json
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from . import onnx_exec
from .errors import BackendError, ConfigError, InvalidInputError
from .preprocess import (
    CROP_SIZE,
    DEFAULT_CHANNEL_STATS,
    STAGE_STANDARDIZED,
    ChannelStats,
    TensorImage,
)

TASK_CLASS_SETS: dict[str, tuple[str, ...]] = {
    "dr-primary": ("Normal", "Mild", "Moderate", "S-(N)-PDR"),
    "dr-expert": ("Severe", "PDR"),
    "dme-m1": ("NoExudates", "Exudates"),
    "dme-m2": ("NotGrade2", "Grade2"),
}

# final grades reported to users, per disease family
FINAL_CLASS_SETS: dict[str, tuple[str, ...]] = {
    "dr": ("Normal", "Mild", "Moderate", "Severe", "PDR"),
    "dme": ("Grade 0", "Grade 1", "Grade 2"),
}

BACKEND_KINDS = ("stub", "table", "onnx-file")


@dataclass(frozen=True)
class ClassSet:
    """Ordered class names for one task."""

    labels: tuple[str, ...]

    def __post_init__(self):
        if len(self.labels) < 2:
            raise ConfigError("a class set needs at least 2 classes")
        if len(set(self.labels)) != len(self.labels):
            raise ConfigError(f"duplicate class names in {self.labels}")
        object.__setattr__(self, "labels", tuple(self.labels))

    @property
    def size(self) -> int:
        return len(self.labels)

    def index_of(self, name: str) -> int:
        try:
            return self.labels.index(name)
        except ValueError:
            raise ConfigError(f"unknown class '{name}' (expected one of {self.labels})")


def class_set_for(task: str) -> ClassSet:
    if task not in TASK_CLASS_SETS:
        raise ConfigError(f"unknown task '{task}' (expected one of {sorted(TASK_CLASS_SETS)})")
    return ClassSet(TASK_CLASS_SETS[task])


def family_of_task(task: str) -> str:
    """Disease family ('dr' or 'dme') a model task belongs to."""
    if task not in TASK_CLASS_SETS:
        raise ConfigError(f"unknown task '{task}' (expected one of {sorted(TASK_CLASS_SETS)})")
    return task.split("-", 1)[0]


def final_class_set(family: str) -> ClassSet:
    if family not in FINAL_CLASS_SETS:
        raise ConfigError(f"unknown family '{family}' (expected one of {sorted(FINAL_CLASS_SETS)})")
    return ClassSet(FINAL_CLASS_SETS[family])


@dataclass(frozen=True)
class Prediction:
    """Raw per-class scores plus their argmax label."""

    scores: tuple[float, ...]
    label: int

    @classmethod
    def from_scores(cls, scores) -> "Prediction":
        arr = np.asarray(scores, dtype=np.float64)
        if arr.ndim != 1 or not np.isfinite(arr).all():
            raise InvalidInputError("scores must be a finite 1-D vector")
        # argmax takes the first maximum, i.e. ties break to the lowest index.
        return cls(scores=tuple(float(s) for s in arr), label=int(np.argmax(arr)))


@dataclass
class ModelHandle:
    """One manifest entry; immutable after load (runtime caches aside)."""

    id: str
    kind: str
    task: str
    class_set: ClassSet
    channel_stats: ChannelStats
    config: Mapping[str, Any] = field(default_factory=dict)
    path: Path | None = None
    single_threaded: bool = False
    _graph: onnx_exec.Graph | None = field(default=None, repr=False, compare=False)
    _lock: threading.Lock | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.single_threaded:
            self._lock = threading.Lock()


@dataclass(frozen=True)
class Manifest:
    """Validated model roster plus the per-task retained-id stanzas."""

    models: tuple[ModelHandle, ...]
    retained: dict[str, tuple[str, ...]]
    source_path: Path | None = None

    def for_task(self, task: str) -> tuple[ModelHandle, ...]:
        return tuple(m for m in self.models if m.task == task)


def _parse_stats(raw, where: str) -> ChannelStats:
    if not isinstance(raw, dict) or set(raw) - {"mean", "std"}:
        raise ConfigError(f"{where}: channel_stats must be an object with 'mean' and 'std'")
    try:
        return ChannelStats(mean=tuple(raw["mean"]), std=tuple(raw["std"]))
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"{where}: malformed channel_stats: {exc}") from exc


def _check_label(value, k: int, where: str) -> int:
    if not isinstance(value, int) or isinstance(value, bool) or not 0 <= value < k:
        raise ConfigError(f"{where}: label {value!r} is not an integer in [0, {k})")
    return value


def _validate_stub(config: Mapping, k: int, where: str) -> None:
    if "scores" in config:
        scores = config["scores"]
        if not isinstance(scores, (list, tuple)) or len(scores) != k:
            raise ConfigError(
                f"{where}: stub scores must have exactly {k} entries, got {len(scores)}"
            )
    elif "label" in config:
        _check_label(config["label"], k, where)
    else:
        raise ConfigError(f"{where}: stub config needs 'label' or 'scores'")


def _validate_table(config: Mapping, k: int, where: str) -> None:
    key_mode = config.get("key", "source")
    if key_mode not in ("source", "checksum"):
        raise ConfigError(f"{where}: table key mode must be 'source' or 'checksum'")
    entries = config.get("entries")
    if not isinstance(entries, dict):
        raise ConfigError(f"{where}: table config needs an 'entries' object")
    for key, value in entries.items():
        if isinstance(value, list):
            for item in value:
                _check_label(item, k, f"{where} entry '{key}'")
        else:
            _check_label(value, k, f"{where} entry '{key}'")
    if "default" in config:
        _check_label(config["default"], k, where)


def load_manifest(path: str | Path) -> Manifest:
    """Load and validate a manifest file.

    Every problem is reported as a configuration error naming the offending
    entry; referenced model files must exist at load time.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"manifest {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"manifest {path} must be a JSON object")

    default_stats = DEFAULT_CHANNEL_STATS
    if "channel_stats" in doc:
        default_stats = _parse_stats(doc["channel_stats"], str(path))

    raw_models = doc.get("models")
    if not isinstance(raw_models, list) or not raw_models:
        raise ConfigError(f"manifest {path} declares no models")

    handles: list[ModelHandle] = []
    seen: set[str] = set()
    for i, entry in enumerate(raw_models):
        where = f"manifest {path.name} model #{i}"
        if not isinstance(entry, dict):
            raise ConfigError(f"{where}: entry must be an object")
        model_id = entry.get("id")
        if not model_id or not isinstance(model_id, str):
            raise ConfigError(f"{where}: missing id")
        where = f"manifest {path.name} model '{model_id}'"
        if model_id in seen:
            raise ConfigError(f"{where}: duplicate id")
        seen.add(model_id)

        kind = entry.get("kind")
        if kind not in BACKEND_KINDS:
            raise ConfigError(f"{where}: unknown kind {kind!r} (expected one of {BACKEND_KINDS})")
        task = entry.get("task")
        if task not in TASK_CLASS_SETS:
            raise ConfigError(
                f"{where}: unknown task {task!r} (expected one of {sorted(TASK_CLASS_SETS)})"
            )
        class_set = class_set_for(task)
        if "class_set" in entry and tuple(entry["class_set"]) != class_set.labels:
            raise ConfigError(
                f"{where}: class_set {entry['class_set']} does not match task "
                f"'{task}' classes {list(class_set.labels)}"
            )

        stats = default_stats
        if "channel_stats" in entry:
            stats = _parse_stats(entry["channel_stats"], where)

        config = entry.get("config", {})
        model_path: Path | None = None
        if kind == "stub":
            _validate_stub(config, class_set.size, where)
        elif kind == "table":
            _validate_table(config, class_set.size, where)
        else:  # onnx-file
            raw_path = entry.get("path")
            if not raw_path:
                raise ConfigError(f"{where}: onnx-file model needs a 'path'")
            model_path = (path.parent / raw_path).resolve()
            if not model_path.is_file():
                raise ConfigError(f"{where}: model file not found: {model_path}")

        handles.append(
            ModelHandle(
                id=model_id,
                kind=kind,
                task=task,
                class_set=class_set,
                channel_stats=stats,
                config=config,
                path=model_path,
                single_threaded=bool(entry.get("single_threaded", False)),
            )
        )

    retained: dict[str, tuple[str, ...]] = {}
    raw_retained = doc.get("retained", {})
    if not isinstance(raw_retained, dict):
        raise ConfigError(f"manifest {path}: 'retained' must map task -> id list")
    ids_by_task: dict[str, set[str]] = {}
    for handle in handles:
        ids_by_task.setdefault(handle.task, set()).add(handle.id)
    for task, ids in raw_retained.items():
        unknown = [m for m in ids if m not in ids_by_task.get(task, set())]
        if unknown:
            raise ConfigError(
                f"manifest {path}: retained ids {unknown} not declared for task '{task}'"
            )
        retained[task] = tuple(ids)

    return Manifest(models=tuple(handles), retained=retained, source_path=path)


def write_manifest(
    path: str | Path,
    models: list[dict],
    channel_stats: ChannelStats | None = None,
    retained: Mapping[str, list[str]] | None = None,
) -> Path:
    """Serialize manifest stanzas to disk in the documented schema."""
    doc: dict[str, Any] = {}
    if channel_stats is not None:
        doc["channel_stats"] = {"mean": list(channel_stats.mean), "std": list(channel_stats.std)}
    doc["models"] = models
    if retained:
        doc["retained"] = {task: list(ids) for task, ids in retained.items()}
    path = Path(path)
    path.write_text(json.dumps(doc, indent=2) + "\n")
    return path


def update_retained(manifest_path: str | Path, out_path: str | Path, task: str, retained_ids: list[str]) -> Path:
    """Copy a manifest file, replacing the retained stanza for one task."""
    doc = json.loads(Path(manifest_path).read_text())
    stanza = doc.get("retained", {})
    stanza[task] = list(retained_ids)
    doc["retained"] = stanza
    out_path = Path(out_path)
    out_path.write_text(json.dumps(doc, indent=2) + "\n")
    return out_path


# ---------------------------------------------------------------------------
# Prediction
# ---------------------------------------------------------------------------

def tensor_checksum(img: TensorImage) -> str:
    """Stable content key for checksum-mode table backends."""
    return hashlib.sha256(np.ascontiguousarray(img.values, dtype=np.float32).tobytes()).hexdigest()


def _predict_stub(model: ModelHandle) -> Prediction:
    if "scores" in model.config:
        return Prediction.from_scores(model.config["scores"])
    k = model.class_set.size
    scores = np.zeros(k)
    scores[model.config["label"]] = 1.0
    return Prediction.from_scores(scores)


def _predict_table(model: ModelHandle, img: TensorImage) -> Prediction:
    config = model.config
    if config.get("key", "source") == "checksum":
        key = tensor_checksum(img)
    else:
        key = img.source
    entries = config["entries"]
    value = entries.get(key) if key is not None else None
    if value is None:
        if "default" in config:
            value = config["default"]
        else:
            raise BackendError(model.id, f"no table entry for key {key!r}")
    if isinstance(value, list):
        if img.crop is None or not 0 <= img.crop < len(value):
            raise BackendError(
                model.id, f"per-crop entry for {key!r} has no slot for crop {img.crop!r}"
            )
        value = value[img.crop]
    k = model.class_set.size
    scores = np.zeros(k)
    scores[value] = 1.0
    return Prediction.from_scores(scores)


def _predict_onnx(model: ModelHandle, img: TensorImage) -> Prediction:
    if model._graph is None:
        try:
            model._graph = onnx_exec.load_graph(model.path)
        except (OSError, InvalidInputError) as exc:
            raise BackendError(model.id, f"cannot load {model.path}: {exc}") from exc
    graph = model._graph
    if len(graph.input_names) != 1:
        raise BackendError(model.id, f"expected 1 graph input, found {len(graph.input_names)}")
    feed = img.values.astype(np.float32)[None, ...]
    try:
        out = onnx_exec.run_graph(graph, {graph.input_names[0]: feed})
    except InvalidInputError as exc:
        raise BackendError(model.id, str(exc)) from exc
    out = np.asarray(out).reshape(-1)
    if out.shape[0] != model.class_set.size:
        raise BackendError(
            model.id,
            f"graph produced {out.shape[0]} scores but the class set has "
            f"{model.class_set.size} classes",
        )
    return Prediction.from_scores(out)


def predict(model: ModelHandle, img: TensorImage) -> Prediction:
    """Score one standardized 224x224 crop with one model.

    Deterministic for a fixed (model id, input bytes) pair; a backend that
    cannot produce exactly K scores raises instead of truncating.
    """
    if img.stage != STAGE_STANDARDIZED:
        raise InvalidInputError(f"predict expects a standardized tensor, got '{img.stage}'")
    if img.values.shape[1:] != (CROP_SIZE, CROP_SIZE):
        raise InvalidInputError(
            f"predict expects {CROP_SIZE}x{CROP_SIZE} inputs, got {img.values.shape[1:]}"
        )
    lock = model._lock
    if lock is not None:
        with lock:
            return _dispatch(model, img)
    return _dispatch(model, img)


def _dispatch(model: ModelHandle, img: TensorImage) -> Prediction:
    if model.kind == "stub":
        return _predict_stub(model)
    if model.kind == "table":
        return _predict_table(model, img)
    if model.kind == "onnx-file":
        return _predict_onnx(model, img)
    raise BackendError(model.id, f"unknown backend kind '{model.kind}'")
