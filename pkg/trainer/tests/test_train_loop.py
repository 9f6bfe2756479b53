"""The fine-tuning loop: checkpointing, logging, schedules, divergence."""

from __future__ import annotations

import csv
import math

import pytest
import torch
import torch.nn as nn

import fundustrain.train as train_mod
from fundustrain.config import TrainConfig
from fundustrain.data import read_labels, task_examples
from fundustrain.errors import ConfigError, DivergenceError
from fundustrain.schedules import plateau_lr_trace, step_lr_trace
from fundustrain.train import (
    EpochRecord,
    finetune,
    load_checkpoint,
    save_checkpoint,
    select_best,
    write_history,
)


@pytest.fixture(scope="module")
def m1_examples(dme_corpus):
    image_dir, labels_csv = dme_corpus
    rows = read_labels(labels_csv, "dme")
    return task_examples(rows, "dme-m1"), image_dir


def quick_cfg(**overrides):
    base = dict(architecture="tinycnn", task="dme-m1", lr=1e-3, schedule="plateau",
                epochs=1, batch_size=8)
    base.update(overrides)
    return TrainConfig(**base)


class TestSelectBest:
    def rec(self, e, val):
        return EpochRecord(epoch=e, lr=1e-3, train_loss=1.0, val_loss=val)

    def test_global_minimum(self):
        history = [self.rec(0, 3.0), self.rec(1, 1.0), self.rec(2, 2.0)]
        assert select_best(history) == 1

    def test_tie_goes_to_the_earliest_epoch(self):
        history = [self.rec(0, 2.0), self.rec(1, 1.0), self.rec(2, 1.0)]
        assert select_best(history) == 1

    def test_empty_history(self):
        with pytest.raises(ConfigError, match="empty"):
            select_best([])


class TestFinetune:
    def test_one_epoch_smoke(self, m1_examples, tmp_path):
        examples, image_dir = m1_examples
        log = tmp_path / "hist.csv"
        result = finetune(quick_cfg(), examples, image_dir, log_path=log)
        assert len(result.history) == 1
        assert math.isfinite(result.history[0].train_loss)
        assert math.isfinite(result.best_val_loss)
        assert result.best_epoch == 0
        assert result.state_dict
        assert log.is_file()

    def test_loss_decreases_on_separable_data(self, m1_examples):
        examples, image_dir = m1_examples
        cfg = quick_cfg(architecture="linear", epochs=5)
        result = finetune(cfg, examples, image_dir)
        losses = [r.train_loss for r in result.history]
        assert losses[-1] < losses[0]

    def test_checkpoint_is_the_validation_minimum(self, m1_examples):
        examples, image_dir = m1_examples
        result = finetune(quick_cfg(epochs=4), examples, image_dir)
        val_losses = [r.val_loss for r in result.history]
        assert result.best_epoch == val_losses.index(min(val_losses))
        assert result.best_epoch == select_best(result.history)
        assert result.best_val_loss == min(val_losses)

    def test_plateau_lrs_follow_the_trace(self, m1_examples):
        examples, image_dir = m1_examples
        cfg = quick_cfg(epochs=5, lr=5e-3)
        result = finetune(cfg, examples, image_dir)
        val_losses = [r.val_loss for r in result.history]
        assert [r.lr for r in result.history] == plateau_lr_trace(5e-3, val_losses)

    def test_step_lrs_follow_the_trace(self, m1_examples):
        examples, image_dir = m1_examples
        cfg = quick_cfg(schedule="step", epochs=5, step_size=2, gamma=0.5)
        result = finetune(cfg, examples, image_dir)
        expected = step_lr_trace(cfg.lr, 5, step_size=2, gamma=0.5)
        assert [r.lr for r in result.history] == expected

    def test_deterministic_given_seed(self, m1_examples):
        examples, image_dir = m1_examples
        cfg = quick_cfg(epochs=2)
        a = finetune(cfg, examples, image_dir)
        b = finetune(cfg, examples, image_dir)
        assert a.history == b.history

    def test_out_of_range_label_rejected(self, m1_examples, tmp_path):
        _, image_dir = m1_examples
        with pytest.raises(ConfigError, match="labels must lie"):
            finetune(quick_cfg(), [(f"x{i}.png", 7) for i in range(10)], image_dir)

    def test_divergence_aborts_and_writes_partial_log(self, m1_examples, tmp_path,
                                                      monkeypatch):
        examples, image_dir = m1_examples

        def poisoned(architecture, num_classes, pretrained=False):
            model = nn.Sequential(nn.Flatten(), nn.Linear(3 * 224 * 224, num_classes))
            with torch.no_grad():
                model[1].weight.fill_(float("nan"))
            return model

        monkeypatch.setattr(train_mod, "build_model", poisoned)
        log = tmp_path / "partial.csv"
        with pytest.raises(DivergenceError, match="epoch 0"):
            finetune(quick_cfg(epochs=3), examples, image_dir, log_path=log)
        with open(log) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["epoch", "lr", "train_loss", "val_loss"]
        assert len(rows) == 2
        assert rows[1][2] == "nan"


class TestHistoryAndCheckpointIO:
    def test_history_round_trips(self, tmp_path):
        history = [
            EpochRecord(0, 1e-3, 0.75, 0.8),
            EpochRecord(1, 9e-4, 0.5, 0.6),
        ]
        path = tmp_path / "h.csv"
        write_history(history, path)
        with open(path) as fh:
            rows = list(csv.DictReader(fh))
        parsed = [
            EpochRecord(int(r["epoch"]), float(r["lr"]),
                        float(r["train_loss"]), float(r["val_loss"]))
            for r in rows
        ]
        assert parsed == history

    def test_checkpoint_round_trips(self, m1_examples, tmp_path):
        examples, image_dir = m1_examples
        result = finetune(quick_cfg(), examples, image_dir)
        path = tmp_path / "ck.pt"
        save_checkpoint(result, path)
        model, payload = load_checkpoint(path)
        assert payload["task"] == "dme-m1"
        assert payload["architecture"] == "tinycnn"
        assert payload["best_epoch"] == result.best_epoch
        for key, value in model.state_dict().items():
            assert torch.equal(value, result.state_dict[key])

    def test_checkpoint_missing_key(self, tmp_path):
        path = tmp_path / "bad.pt"
        torch.save({"task": "dme-m1"}, path)
        with pytest.raises(ConfigError, match="architecture"):
            load_checkpoint(path)
