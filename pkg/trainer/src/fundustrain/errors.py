"""Exception taxonomy for the training package."""

from __future__ import annotations


class TrainerError(Exception):
    """Base class for every error this package raises on purpose."""


class ConfigError(TrainerError):
    """A configuration value or input file is unusable."""


class DivergenceError(TrainerError):
    """Training produced a non-finite loss; the partial log was written."""


class ExportError(TrainerError):
    """The model cannot be exported in the declared shape."""
