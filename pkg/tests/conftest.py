from typing import Callable, List, Tuple

import numpy as np
import pytest

from meshfree_filter.logging_utils import DiagnosticLog
from meshfree_filter.scenarios import LinearGaussianModel
from meshfree_filter.statespace import GaussianSpec, StateSpaceModel


class StaticModel(StateSpaceModel):
    """``x' = x`` whatever the noise; observes ``x`` or a constant."""

    def __init__(self, d: int = 1, constant_observation: bool = False, obs_var: float = 1.0) -> None:
        super().__init__(
            d=d,
            q=d,
            state_noise=GaussianSpec.isotropic(d, 1.0),
            obs_noise=GaussianSpec.isotropic(d, obs_var),
            obs_scale=np.ones(d),
        )
        self.constant_observation = constant_observation

    def transition(self, x, w, k):
        return np.array(x, dtype=float, copy=True)

    def observe(self, x, k):
        x = np.asarray(x, dtype=float)
        return np.zeros_like(x) if self.constant_observation else x.copy()


class FunctionModel(StateSpaceModel):
    """Scalar model ``x' = func(x, w)`` with an optional positivity domain."""

    def __init__(self, func: Callable, positive: bool = False) -> None:
        super().__init__(
            d=1,
            q=1,
            state_noise=GaussianSpec.isotropic(1, 1.0),
            obs_noise=GaussianSpec.isotropic(1, 1.0),
            obs_scale=np.ones(1),
        )
        self.func = func
        self.positive = positive

    def transition(self, x, w, k):
        return self.func(np.asarray(x, dtype=float), np.asarray(w, dtype=float))

    def observe(self, x, k):
        return np.array(x, dtype=float, copy=True)

    def domain_guard(self, x):
        x = np.asarray(x, dtype=float)
        inside = np.all(np.isfinite(x), axis=-1)
        if self.positive:
            inside &= np.all(x > 0, axis=-1)
        return bool(inside) if np.ndim(inside) == 0 else inside


class RecordingLog(DiagnosticLog):
    def __init__(self) -> None:
        super().__init__(enabled=True, verbose=True)
        self.records: List[Tuple[str, str]] = []

    def debug(self, msg: str) -> None:
        self.records.append(("debug", msg))

    def info(self, msg: str) -> None:
        self.records.append(("info", msg))

    def warning(self, msg: str) -> None:
        self.records.append(("warning", msg))

    def error(self, msg: str) -> None:
        self.records.append(("error", msg))

    def messages(self, level: str) -> List[str]:
        return [msg for lvl, msg in self.records if lvl == level]


def kalman_means(
    model: LinearGaussianModel,
    p0: GaussianSpec,
    observations: np.ndarray,
) -> Tuple[np.ndarray, np.ndarray]:
    """Exact Kalman posterior means and covariances for a linear-Gaussian model."""
    a = model.transition_matrix
    h = model.observation_matrix
    q = np.diag(model.noise_scale**2) * model.dt
    r = model.observation_spec().matrix()
    mean = p0.mean.copy()
    cov = p0.matrix()
    means, covs = [], []
    for y in observations:
        mean = a @ mean
        cov = a @ cov @ a.T + q
        s = h @ cov @ h.T + r
        gain = cov @ h.T @ np.linalg.inv(s)
        mean = mean + gain @ (y - h @ mean)
        cov = (np.eye(len(mean)) - gain @ h) @ cov
        means.append(mean.copy())
        covs.append(cov.copy())
    return np.array(means), np.array(covs)


@pytest.fixture
def static_model():
    return StaticModel


@pytest.fixture
def function_model():
    return FunctionModel


@pytest.fixture
def recording_log():
    return RecordingLog()


@pytest.fixture
def kalman():
    return kalman_means
