"""Learning-rate schedules as pure traces plus loop-facing controllers.

Two schedules exist:

* ``step``: the lr used at epoch e (0-based) is lr0 * gamma ** (e // step_size),
  i.e. a 0.9x decay every 10 epochs under the defaults.
* ``plateau``: the lr drops by a fixed factor (default 0.9, a 10% cut)
  after every epoch whose validation loss fails to improve the best loss
  seen so far. Improvement is strict; the first epoch always counts as an
  improvement. There is no patience window and no cooldown: every
  non-improving epoch cuts the rate again.

The trace functions answer "which lr was used at each epoch" for a whole
run at once; the controllers feed a live training loop one epoch at a
time. Both multiply cumulatively in the same order, so their outputs are
bitwise identical, and tests hold them to that.
"""

from __future__ import annotations

from typing import Sequence

from .errors import ConfigError


def _check_lr(lr0: float) -> None:
    if not lr0 > 0:
        raise ConfigError(f"lr must be positive, got {lr0}")


def step_lr_trace(lr0: float, epochs: int, step_size: int = 10,
                  gamma: float = 0.9) -> list[float]:
    """Learning rate used at each of ``epochs`` epochs under step decay."""
    _check_lr(lr0)
    if step_size < 1:
        raise ConfigError(f"step_size must be at least 1, got {step_size}")
    return [lr0 * gamma ** (e // step_size) for e in range(epochs)]


def plateau_lr_trace(lr0: float, val_losses: Sequence[float],
                     factor: float = 0.9) -> list[float]:
    """Learning rate used at each epoch, given that epoch's eventual val loss.

    Entry e is the lr in force while epoch e trained; the loss it produced
    then decides whether entry e+1 is cut.
    """
    _check_lr(lr0)
    trace: list[float] = []
    lr = lr0
    best: float | None = None
    for loss in val_losses:
        trace.append(lr)
        if best is None or loss < best:
            best = loss
        else:
            lr *= factor
    return trace


class StepDecay:
    """Closed-form controller for the step schedule."""

    def __init__(self, lr0: float, step_size: int = 10, gamma: float = 0.9) -> None:
        _check_lr(lr0)
        if step_size < 1:
            raise ConfigError(f"step_size must be at least 1, got {step_size}")
        self.lr0 = lr0
        self.step_size = step_size
        self.gamma = gamma

    def lr_for_epoch(self, epoch: int) -> float:
        return self.lr0 * self.gamma ** (epoch // self.step_size)

    def observe(self, val_loss: float) -> None:
        """Step decay ignores validation loss; kept for a uniform loop."""


class PlateauDecay:
    """Stateful controller cutting the lr after non-improving epochs."""

    def __init__(self, lr0: float, factor: float = 0.9) -> None:
        _check_lr(lr0)
        self._lr = lr0
        self.factor = factor
        self._best: float | None = None
        self._epoch = 0

    def lr_for_epoch(self, epoch: int) -> float:
        if epoch != self._epoch:
            raise ConfigError(
                f"plateau decay is sequential: expected epoch {self._epoch}, got {epoch}"
            )
        return self._lr

    def observe(self, val_loss: float) -> None:
        self._epoch += 1
        if self._best is None or val_loss < self._best:
            self._best = val_loss
        else:
            self._lr *= self.factor


def make_controller(schedule: str, lr0: float, *, step_size: int = 10,
                    gamma: float = 0.9, plateau_factor: float = 0.9):
    if schedule == "step":
        return StepDecay(lr0, step_size=step_size, gamma=gamma)
    if schedule == "plateau":
        return PlateauDecay(lr0, factor=plateau_factor)
    raise ConfigError(f"unknown schedule '{schedule}' (expected 'plateau' or 'step')")
