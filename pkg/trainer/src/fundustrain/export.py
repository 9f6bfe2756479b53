"""ONNX export plus the manifest stanza the grading engine consumes.

Exported graphs take one 1x3x224x224 float input and return one 1xK
score row, where K is the task's class count. The stanza embeds the
class names and, when given, the channel statistics, so the grading
engine needs no out-of-band knowledge about a trained model.
"""

from __future__ import annotations

import contextlib
import json
import warnings
from pathlib import Path
from typing import Mapping, Sequence

import torch
import torch.nn as nn

from .config import TASK_CLASS_SETS
from .errors import ConfigError, ExportError

INPUT_SHAPE = (1, 3, 224, 224)


@contextlib.contextmanager
def _onnxscript_passthrough():
    """Export without the ``onnx`` package installed.

    The serializer's final hook only reloads the graph to re-embed
    script-function bodies; a plain traced graph has none, so passing
    the bytes through unchanged is sound. The hook moved modules across
    torch releases, hence the two probes.
    """
    module = None
    try:
        from torch.onnx._internal.torchscript_exporter import onnx_proto_utils as module
    except ImportError:
        try:
            from torch.onnx._internal import onnx_proto_utils as module
        except ImportError:
            pass
    if module is None or not hasattr(module, "_add_onnxscript_fn"):
        yield
        return
    original = module._add_onnxscript_fn
    module._add_onnxscript_fn = lambda model_bytes, custom_opsets: model_bytes
    try:
        yield
    finally:
        module._add_onnxscript_fn = original


def export_onnx(model: nn.Module, out_path: str | Path, *, model_id: str,
                task: str, channel_stats: Mapping[str, Sequence[float]] | None = None,
                ) -> dict:
    """Write ``out_path`` and return the model's manifest stanza."""
    if task not in TASK_CLASS_SETS:
        raise ConfigError(f"unknown task '{task}' (expected one of {sorted(TASK_CLASS_SETS)})")
    if not model_id:
        raise ConfigError("model_id must be non-empty")
    class_set = TASK_CLASS_SETS[task]

    model.eval()
    with torch.no_grad():
        probe = model(torch.zeros(INPUT_SHAPE))
    if tuple(probe.shape) != (1, len(class_set)):
        raise ExportError(
            f"model produces scores of shape {tuple(probe.shape)} but task "
            f"'{task}' declares {len(class_set)} classes; expected (1, {len(class_set)})"
        )

    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with _onnxscript_passthrough(), warnings.catch_warnings():
        # the traced exporter announces its own deprecation from several
        # internal modules; silence it for this call only
        warnings.filterwarnings(
            "ignore", message=".*TorchScript-based ONNX export.*",
            category=DeprecationWarning,
        )
        warnings.filterwarnings(
            "ignore", category=DeprecationWarning, module=r"torch\.onnx(\..*)?",
        )
        torch.onnx.export(model, (torch.zeros(INPUT_SHAPE),), str(out_path), dynamo=False)

    stanza: dict = {
        "id": model_id,
        "kind": "onnx-file",
        "task": task,
        "path": out_path.name,
        "class_set": list(class_set),
    }
    if channel_stats is not None:
        stanza["channel_stats"] = {
            "mean": [float(v) for v in channel_stats["mean"]],
            "std": [float(v) for v in channel_stats["std"]],
        }
    return stanza


def build_manifest(stanzas: Sequence[Mapping]) -> dict:
    """Assemble stanzas into a manifest that retains every model."""
    if not stanzas:
        raise ConfigError("manifest needs at least one model")
    retained: dict[str, list[str]] = {}
    for stanza in stanzas:
        retained.setdefault(stanza["task"], []).append(stanza["id"])
    return {"models": [dict(s) for s in stanzas], "retained": retained}


def write_manifest(stanzas: Sequence[Mapping], path: str | Path) -> None:
    """Write a ready-to-grade manifest next to the exported models."""
    with open(path, "w") as fh:
        json.dump(build_manifest(stanzas), fh, indent=2)
        fh.write("\n")
