"""Training configuration: architecture zoo, task defaults, validation.

Each grading task fine-tunes a fixed family of ImageNet architectures.
The retinopathy classifiers draw on five ResNets and three DenseNets;
the edema detectors each use three networks. Two toy architectures
(``linear`` and ``tinycnn``) are accepted for every task so the whole
pipeline can run in seconds without pretrained weights.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from .errors import ConfigError

# class labels per model task; the export manifest repeats these names
TASK_CLASS_SETS: dict[str, tuple[str, ...]] = {
    "dr-primary": ("Normal", "Mild", "Moderate", "S-(N)-PDR"),
    "dr-expert": ("Severe", "PDR"),
    "dme-m1": ("NoExudates", "Exudates"),
    "dme-m2": ("NotGrade2", "Grade2"),
}

_DR_ZOO = (
    "resnet18", "resnet34", "resnet50", "resnet101", "resnet152",
    "densenet121", "densenet169", "densenet201",
)

TASK_ARCHITECTURES: dict[str, tuple[str, ...]] = {
    "dr-primary": _DR_ZOO,
    "dr-expert": _DR_ZOO,
    "dme-m1": ("densenet161", "densenet169", "densenet201"),
    "dme-m2": ("densenet161", "resnet34", "resnet50"),
}

TOY_ARCHITECTURES = ("linear", "tinycnn")

ARCHITECTURES: tuple[str, ...] = tuple(sorted(
    {arch for zoo in TASK_ARCHITECTURES.values() for arch in zoo}
    | set(TOY_ARCHITECTURES)
))

SCHEDULES = ("plateau", "step")

# (lr, schedule): retinopathy starts at 1e-3 with plateau decay, edema at
# 1e-4 with step decay
TASK_DEFAULTS: dict[str, tuple[float, str]] = {
    "dr-primary": (1e-3, "plateau"),
    "dr-expert": (1e-3, "plateau"),
    "dme-m1": (1e-4, "step"),
    "dme-m2": (1e-4, "step"),
}

DEFAULT_EPOCHS = 30


@dataclass(frozen=True)
class TrainConfig:
    """One fine-tuning run.

    ``batch_size`` and ``pretrained`` are toy-scale defaults chosen here,
    not derived quantities; flip ``pretrained`` only with a local
    torchvision weight cache, since the sandbox cannot download weights.
    """

    architecture: str
    task: str
    lr: float
    schedule: str
    epochs: int = DEFAULT_EPOCHS
    split_seed: int = 0
    batch_size: int = 8
    step_size: int = 10
    gamma: float = 0.9
    plateau_factor: float = 0.9
    pretrained: bool = False

    def __post_init__(self) -> None:
        if self.task not in TASK_ARCHITECTURES:
            raise ConfigError(
                f"unknown task '{self.task}' (expected one of {sorted(TASK_ARCHITECTURES)})"
            )
        allowed = TASK_ARCHITECTURES[self.task] + TOY_ARCHITECTURES
        if self.architecture not in allowed:
            raise ConfigError(
                f"architecture '{self.architecture}' is not in the {self.task} zoo "
                f"{sorted(allowed)}"
            )
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.schedule not in SCHEDULES:
            raise ConfigError(
                f"unknown schedule '{self.schedule}' (expected one of {SCHEDULES})"
            )
        if self.epochs < 1:
            raise ConfigError(f"epochs must be at least 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be at least 1, got {self.batch_size}")
        if self.step_size < 1:
            raise ConfigError(f"step_size must be at least 1, got {self.step_size}")
        if not 0 < self.gamma <= 1:
            raise ConfigError(f"gamma must be in (0, 1], got {self.gamma}")
        if not 0 < self.plateau_factor <= 1:
            raise ConfigError(
                f"plateau_factor must be in (0, 1], got {self.plateau_factor}"
            )

    @property
    def num_classes(self) -> int:
        return len(TASK_CLASS_SETS[self.task])

    @classmethod
    def for_task(cls, task: str, architecture: str, **overrides) -> "TrainConfig":
        """Build a config from the task's default lr and schedule."""
        if task not in TASK_DEFAULTS:
            raise ConfigError(
                f"unknown task '{task}' (expected one of {sorted(TASK_DEFAULTS)})"
            )
        lr, schedule = TASK_DEFAULTS[task]
        base = cls(architecture=architecture, task=task, lr=lr, schedule=schedule)
        return replace(base, **overrides) if overrides else base
