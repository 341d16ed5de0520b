"""
Exception hierarchy for retcomplete.

Every failure raised on purpose by the package derives from RetCompletionError so the
command-line frontend can map it to an exit code and a single-line message.
"""

from pathlib import Path
from typing import Any, Dict, Optional, Union


class RetCompletionError(Exception):
    """Base exception for retcomplete errors."""

    pass


class DimensionError(RetCompletionError):
    """Raised when tensor shapes do not fit an operation."""

    pass


class NonFiniteError(RetCompletionError):
    """Raised in debug mode when an operation produces NaN or Inf."""

    pass


class UsageError(RetCompletionError):
    """Raised when an API or command is called with invalid arguments."""

    pass


class VocabularyError(RetCompletionError):
    """Raised when a palette cannot be fitted or an index is outside it."""

    pass


class ConfigError(RetCompletionError):
    """Raised when a configuration file is invalid or references missing files."""

    pass


class CheckpointError(RetCompletionError):
    """Raised when a checkpoint cannot be written, read or matched to a config."""

    pass


class ImageIOError(RetCompletionError):
    """
    Raised when an image or mask file cannot be decoded or encoded.

    Attributes:
        path: File involved in the failure
        offset: Byte offset of the problem when known
    """

    def __init__(
        self, message: str, path: Union[str, Path], offset: Optional[int] = None
    ) -> None:
        self.path = Path(path)
        self.offset = offset
        where = f"{self.path}" if offset is None else f"{self.path} @ byte {offset}"
        super().__init__(f"{message} ({where})")


class TrainingError(RetCompletionError):
    """
    Raised when optimisation diverges.

    Attributes:
        diagnostics: Step, per-sample losses and gradient norm at the failure
    """

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None) -> None:
        self.diagnostics = diagnostics or {}
        details = ", ".join(f"{k}={v}" for k, v in self.diagnostics.items())
        super().__init__(f"{message} [{details}]" if details else message)


class BenchError(RetCompletionError):
    """Raised when a benchmark cannot produce trustworthy numbers."""

    pass
