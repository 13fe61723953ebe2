from __future__ import annotations

from typing import Any


class FilterError(Exception):
    """Base error for the meshfree filter package."""


class DimensionError(FilterError, ValueError):
    """Raised when vector or matrix sizes do not match."""


class InvalidSpecError(FilterError, ValueError):
    """Raised when a Gaussian spec or a library config is invalid."""


class ModelDomainError(FilterError):
    """Raised when a state cannot be kept inside the model's admissible domain."""

    def __init__(self, message: str, node: Any = None) -> None:
        super().__init__(message)
        self.node = node


class DivergenceError(FilterError):
    """Raised when a filter loses track of the observations."""


class ConfigError(FilterError):
    """Raised when the harness configuration is invalid."""


class PlotDataError(FilterError):
    """Raised when plot-data inputs are missing or inconsistent."""
