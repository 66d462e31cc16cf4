"""
Error Types
===========

Library code raises these; only the CLI turns them into exit codes.
"""
from typing import Optional, Sequence


class OptCtrlError(Exception):
    """Base class for all library errors."""

    exit_code = 1


class ConfigError(OptCtrlError):
    """Bad flags, bad config file or invalid settings."""

    exit_code = 2


class MeshParseError(OptCtrlError):
    """Malformed mesh, target or report input."""

    exit_code = 3


class NumericalError(OptCtrlError):
    """A factorization or small dense solve failed."""

    exit_code = 4

    def __init__(
        self,
        message: str,
        condition: Optional[float] = None,
        indices: Optional[Sequence[int]] = None,
    ):
        self.condition = condition
        self.indices = list(indices) if indices is not None else None
        if condition is not None:
            message = f"{message} (condition estimate {condition:.3e})"
        if self.indices:
            message = f"{message} [indices: {', '.join(str(i) for i in self.indices)}]"
        super().__init__(message)
