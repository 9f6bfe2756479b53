"""Fine-tuning loop: Adam on cross-entropy with a decaying learning rate.

The loop trains on a 70% shuffle split, validates on the next 20%, and
keeps the weights from the epoch with the lowest validation loss (ties
go to the earliest such epoch). Every epoch appends one history row;
a non-finite loss aborts the run after writing the rows recorded so far.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import torch
import torch.nn.functional as F
from torch.utils.data import DataLoader

from .config import TrainConfig
from .data import Example, FundusDataset, split_70_20
from .errors import ConfigError, DivergenceError
from .models import build_model
from .schedules import make_controller

HISTORY_HEADER = ("epoch", "lr", "train_loss", "val_loss")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float


@dataclass
class TrainResult:
    config: TrainConfig
    state_dict: dict
    best_epoch: int
    best_val_loss: float
    history: tuple[EpochRecord, ...]


def select_best(history: Sequence[EpochRecord]) -> int:
    """Index of the global validation-loss minimum; ties pick the earliest."""
    if not history:
        raise ConfigError("history is empty")
    best = 0
    for i, record in enumerate(history):
        if record.val_loss < history[best].val_loss:
            best = i
    return best


def write_history(history: Sequence[EpochRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(HISTORY_HEADER)
        for r in history:
            writer.writerow([r.epoch, repr(r.lr), repr(r.train_loss), repr(r.val_loss)])


def _mean_loss(model, loader, train: bool, optimizer=None) -> float:
    total, count = 0.0, 0
    for images, labels in loader:
        if train:
            optimizer.zero_grad()
            loss = F.cross_entropy(model(images), labels)
            loss.backward()
            optimizer.step()
        else:
            with torch.no_grad():
                loss = F.cross_entropy(model(images), labels)
        total += float(loss.item()) * len(labels)
        count += len(labels)
    return total / count


def finetune(cfg: TrainConfig, examples: Sequence[Example], image_dir: str | Path,
             log_path: str | Path | None = None) -> TrainResult:
    """Train per the config on already-relabeled examples.

    ``examples`` must carry the task's class indices, not raw grades.
    """
    bad = [lbl for _, lbl in examples if not 0 <= lbl < cfg.num_classes]
    if bad:
        raise ConfigError(
            f"labels must lie in [0, {cfg.num_classes}) for task '{cfg.task}', "
            f"found {sorted(set(bad))}"
        )
    train_rows, val_rows = split_70_20(examples, cfg.split_seed)

    torch.manual_seed(cfg.split_seed)
    model = build_model(cfg.architecture, cfg.num_classes, cfg.pretrained)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    controller = make_controller(
        cfg.schedule, cfg.lr,
        step_size=cfg.step_size, gamma=cfg.gamma, plateau_factor=cfg.plateau_factor,
    )

    train_loader = DataLoader(
        FundusDataset(train_rows, image_dir),
        batch_size=cfg.batch_size,
        shuffle=True,
        generator=torch.Generator().manual_seed(cfg.split_seed),
    )
    val_loader = DataLoader(
        FundusDataset(val_rows, image_dir), batch_size=cfg.batch_size
    )

    history: list[EpochRecord] = []
    best_state: dict = {}
    best_epoch = -1
    best_val = math.inf
    for epoch in range(cfg.epochs):
        lr = controller.lr_for_epoch(epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr

        model.train()
        train_loss = _mean_loss(model, train_loader, train=True, optimizer=optimizer)
        model.eval()
        val_loss = _mean_loss(model, val_loader, train=False)
        history.append(EpochRecord(epoch, lr, train_loss, val_loss))

        if not (math.isfinite(train_loss) and math.isfinite(val_loss)):
            if log_path is not None:
                write_history(history, log_path)
            raise DivergenceError(
                f"non-finite loss at epoch {epoch} "
                f"(train {train_loss}, val {val_loss}); history has {len(history)} rows"
            )

        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        controller.observe(val_loss)

    if log_path is not None:
        write_history(history, log_path)
    return TrainResult(
        config=cfg,
        state_dict=best_state,
        best_epoch=best_epoch,
        best_val_loss=best_val,
        history=tuple(history),
    )


def save_checkpoint(result: TrainResult, path: str | Path) -> None:
    """Persist the best weights with enough metadata to rebuild the model."""
    torch.save(
        {
            "architecture": result.config.architecture,
            "task": result.config.task,
            "num_classes": result.config.num_classes,
            "best_epoch": result.best_epoch,
            "best_val_loss": result.best_val_loss,
            "state_dict": result.state_dict,
        },
        path,
    )


def load_checkpoint(path: str | Path):
    """Rebuild the checkpointed model in eval mode, plus its metadata."""
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # torch.load failures span pickle, zip, and runtime errors
        raise ConfigError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict):
        raise ConfigError(f"checkpoint {path} does not hold a metadata dict")
    for key in ("architecture", "task", "num_classes", "state_dict"):
        if key not in payload:
            raise ConfigError(f"checkpoint {path} is missing '{key}'")
    model = build_model(payload["architecture"], payload["num_classes"])
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload
