from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Dict, List, Optional

import numpy as np

if TYPE_CHECKING:
    from .filter import PointCloud


@dataclass(frozen=True, eq=False)
class TruthRecord:
    states: np.ndarray  # (K + 1, d), row 0 is X_0
    observations: np.ndarray  # (K, q), row k - 1 is Y_k

    @property
    def steps(self) -> int:
        return int(self.observations.shape[0])


@dataclass(frozen=True, eq=False)
class TrajectoryRecord:
    """Per-step truth, estimate and error of one realization (steps 1..K)."""

    realization: int
    seed: int
    method: str
    truth: np.ndarray  # (K, d)
    observations: np.ndarray  # (K, q)
    estimates: np.ndarray  # (K, d)
    errors: np.ndarray  # (K,)
    resampled: np.ndarray  # (K,) bool
    wall_clock_seconds: float


@dataclass(frozen=True, eq=False)
class ErrorSeries:
    errors: np.ndarray
    realization: int
    method: str

    def __post_init__(self) -> None:
        errors = np.asarray(self.errors, dtype=float)
        if errors.ndim != 1:
            raise ValueError(f"error series must be a vector, got shape {errors.shape}")
        if np.any(errors < 0) or not np.all(np.isfinite(errors)):
            raise ValueError("error series entries must be finite and non-negative")
        object.__setattr__(self, "errors", errors)


@dataclass
class RealizationOutcome:
    realization: int
    seed: int
    trajectory: Optional[TrajectoryRecord] = None
    failure: Optional[str] = None
    clouds: Dict[int, "PointCloud"] = field(default_factory=dict)
    diagnostics: Dict[str, int] = field(default_factory=dict)

    @property
    def completed(self) -> bool:
        return self.trajectory is not None


@dataclass
class RunSummary:
    method: str
    scenario: str
    parameters: Dict[str, object]
    config_hash: str
    seeds: List[int]
    err_g: Optional[float]
    wall_clock_seconds: float
    mean_wall_clock_seconds: Optional[float]
    completed: int
    divergences: List[Dict[str, object]] = field(default_factory=list)
    diagnostics: Dict[str, int] = field(default_factory=dict)

    @property
    def repetitions(self) -> int:
        return len(self.seeds)

    @property
    def divergence_count(self) -> int:
        return len(self.divergences)
