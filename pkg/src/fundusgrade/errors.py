"""Exception hierarchy shared by all pipeline stages.

The CLI maps these onto its exit-code contract: configuration problems
exit 2, runtime failures exit 1.
"""


class FundusGradeError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(FundusGradeError):
    """Invalid manifest, class set, or other configuration input."""


class InvalidInputError(FundusGradeError):
    """Malformed runtime input: unreadable image, bad dimensions, empty list."""


class BackendError(FundusGradeError):
    """A classifier backend failed; carries the offending model id."""

    def __init__(self, model_id: str, message: str):
        super().__init__(f"model '{model_id}': {message}")
        self.model_id = model_id
