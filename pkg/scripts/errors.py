"""Exception hierarchy shared by every stage.

ValueError-derived classes keep `except ValueError` call sites working.
"""

from __future__ import annotations

from typing import Any, Dict, List, Optional


class ForensicsError(Exception):
    """Base class for all toolchain failures."""


class DimensionError(ForensicsError, ValueError):
    """Tensor shapes are incompatible."""


class ConfigurationError(ForensicsError, ValueError):
    """Invalid recipe, profile entry or missing path."""


class ArgumentError(ForensicsError, ValueError):
    """Empty or otherwise unusable argument (no data, empty zoo...)."""


class FormatError(ForensicsError):
    """Corrupt container or meta file; the message names the file."""

    def __init__(self, path: Any, reason: str) -> None:
        super().__init__(f"{path}: {reason}")
        self.path = str(path)
        self.reason = reason


class TrainingError(ForensicsError):
    """Training diverged."""

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None) -> None:
        super().__init__(message)
        self.diagnostics: Dict[str, Any] = dict(diagnostics or {})


class OptimizationError(ForensicsError):
    """Decomposition or inversion produced a non-finite loss."""

    def __init__(self, message: str, trace: Optional[List[float]] = None) -> None:
        super().__init__(message)
        self.trace: List[float] = list(trace or [])
