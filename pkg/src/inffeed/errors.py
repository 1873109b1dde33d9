"""Exception hierarchy shared across the toolkit.

Every exception carries a stable machine-readable ``code`` so the CLI can
emit structured error JSON.
"""

from __future__ import annotations


class InfFeedError(Exception):
    """Base class for all toolkit errors."""

    code = "error"

    def to_json(self) -> dict:
        return {"code": self.code, "message": str(self)}


class ValidationError(InfFeedError):
    """Input violates a documented precondition or invariant."""

    code = "validation"


class FormatError(InfFeedError):
    """A corpus file is malformed (ragged vectors, bad records)."""

    code = "format"


class CapacityError(InfFeedError):
    """A dense-computation cap was exceeded; use the matrix-free path."""

    code = "capacity"


class TrainingError(InfFeedError):
    """Optimization diverged (non-finite loss)."""

    code = "training"

    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message)
        self.epoch = epoch


class ApproximationError(InfFeedError):
    """A stochastic estimator diverged (e.g. truncated Neumann recursion)."""

    code = "approximation"
