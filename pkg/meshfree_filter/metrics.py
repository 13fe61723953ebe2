"""Per-step L2 error and the global root-mean-square error over realizations."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .exceptions import DimensionError
from .models import ErrorSeries


def step_error(estimate: np.ndarray, truth: np.ndarray) -> float:
    estimate = np.asarray(estimate, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if estimate.shape != truth.shape:
        raise DimensionError(f"estimate has shape {estimate.shape}, truth has shape {truth.shape}")
    return float(np.linalg.norm(estimate - truth))


def step_errors(estimates: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Row-wise Euclidean errors of a ``(K, d)`` estimate trajectory."""
    estimates = np.atleast_2d(np.asarray(estimates, dtype=float))
    truth = np.atleast_2d(np.asarray(truth, dtype=float))
    if estimates.shape != truth.shape:
        raise DimensionError(f"estimates have shape {estimates.shape}, truth has shape {truth.shape}")
    return np.sqrt(np.sum((estimates - truth) ** 2, axis=1))


def global_rmse(series: Sequence[ErrorSeries]) -> float:
    """``sqrt(mean_j mean_k err_k(j)^2)``; every series must have the same length."""
    if not series:
        raise ValueError("global_rmse needs at least one error series")
    lengths = {item.errors.size for item in series}
    if len(lengths) != 1:
        raise DimensionError(f"error series have different lengths: {sorted(lengths)}")
    if 0 in lengths:
        raise ValueError("error series must not be empty")
    stacked = np.stack([item.errors for item in series])
    return float(np.sqrt(np.mean(stacked**2)))
