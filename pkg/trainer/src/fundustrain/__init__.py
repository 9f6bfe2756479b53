"""Toy-scale fine-tuning and ONNX export for the fundus grading engine."""

from .config import ARCHITECTURES, TASK_ARCHITECTURES, TASK_CLASS_SETS, TrainConfig
from .data import FundusDataset, read_labels, split_70_20, task_examples
from .errors import ConfigError, DivergenceError, ExportError, TrainerError
from .export import build_manifest, export_onnx, write_manifest
from .schedules import PlateauDecay, StepDecay, plateau_lr_trace, step_lr_trace
from .train import TrainResult, finetune, load_checkpoint, save_checkpoint, select_best

__all__ = [
    "ARCHITECTURES",
    "TASK_ARCHITECTURES",
    "TASK_CLASS_SETS",
    "TrainConfig",
    "FundusDataset",
    "read_labels",
    "split_70_20",
    "task_examples",
    "ConfigError",
    "DivergenceError",
    "ExportError",
    "TrainerError",
    "build_manifest",
    "export_onnx",
    "write_manifest",
    "PlateauDecay",
    "StepDecay",
    "plateau_lr_trace",
    "step_lr_trace",
    "TrainResult",
    "finetune",
    "load_checkpoint",
    "save_checkpoint",
    "select_best",
]
