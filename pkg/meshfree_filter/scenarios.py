"""Benchmark scenarios: tumoral growth, 3-D bearing-only tracking, linear-Gaussian.

Both nonlinear scenarios inject noise as ``sigma ∘ w`` with ``w ~ N(0, I Δ)``
and observe through ``g(x) + R ∘ v`` with ``v ~ N(0, I Δ)``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Any, Dict, Mapping, Optional, Sequence, Tuple, Type

import numpy as np

from .exceptions import ConfigError, DimensionError, InvalidSpecError
from .models import TruthRecord
from .statespace import (
    GaussianSpec,
    RandomLike,
    StateSpaceModel,
    as_generator,
    propagate,
    sample_gaussian,
)

DISCRETIZATIONS = ("euler", "paper_literal")


def _diagonal_stack(diagonal: np.ndarray, leading: Tuple[int, ...]) -> np.ndarray:
    matrix = np.diag(np.asarray(diagonal, dtype=float))
    return np.broadcast_to(matrix, leading + matrix.shape).copy()


# --- tumoral growth -------------------------------------------------------


def tumor_drift(x: np.ndarray, alpha: Sequence[float] = (1.0, 0.2, 0.2)) -> np.ndarray:
    """``F(x) = (a1 x1 ln(x2 / x1), a2 x1 - a3 x2 x1^(2/3))``."""
    x = np.asarray(x, dtype=float)
    a1, a2, a3 = alpha
    x1, x2 = x[..., 0], x[..., 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        f1 = a1 * x1 * np.log(x2 / x1)
        f2 = a2 * x1 - a3 * x2 * np.cbrt(x1) ** 2
    return np.stack([f1, f2], axis=-1)


def tumor_transition(
    x: np.ndarray,
    w: np.ndarray,
    mode: str = "euler",
    dt: float = 0.2,
    alpha: Sequence[float] = (1.0, 0.2, 0.2),
    sigma: Sequence[float] = (0.01, 0.01),
) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    step = tumor_drift(x, alpha) * dt + np.asarray(sigma) * np.asarray(w, dtype=float)
    if mode == "euler":
        return x + step
    if mode == "paper_literal":
        return step
    raise InvalidSpecError(f"discretization must be one of {DISCRETIZATIONS}, got {mode!r}")


class TumorModel(StateSpaceModel):
    def __init__(
        self,
        dt: float,
        alpha: Sequence[float],
        noise_scale: Sequence[float],
        obs_scale: Sequence[float],
        discretization: str = "euler",
    ) -> None:
        if discretization not in DISCRETIZATIONS:
            raise InvalidSpecError(f"discretization must be one of {DISCRETIZATIONS}, got {discretization!r}")
        super().__init__(
            d=2,
            q=2,
            state_noise=GaussianSpec.isotropic(2, dt),
            obs_noise=GaussianSpec.isotropic(2, dt),
            obs_scale=np.asarray(obs_scale, dtype=float),
        )
        self.dt = float(dt)
        self.alpha = tuple(float(a) for a in alpha)
        self.noise_scale = np.asarray(noise_scale, dtype=float)
        self.discretization = discretization

    def transition(self, x: np.ndarray, w: np.ndarray, k: int) -> np.ndarray:
        return tumor_transition(x, w, self.discretization, self.dt, self.alpha, self.noise_scale)

    def transition_jacobian_x(self, x: np.ndarray, w: np.ndarray, k: int) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        a1, a2, a3 = self.alpha
        x1, x2 = x[..., 0], x[..., 1]
        with np.errstate(divide="ignore", invalid="ignore"):
            cube_root = np.cbrt(x1)
            jacobian = np.empty(x.shape[:-1] + (2, 2))
            jacobian[..., 0, 0] = a1 * (np.log(x2 / x1) - 1.0)
            jacobian[..., 0, 1] = a1 * x1 / x2
            jacobian[..., 1, 0] = a2 - (2.0 / 3.0) * a3 * x2 / cube_root
            jacobian[..., 1, 1] = -a3 * cube_root**2
        jacobian *= self.dt
        if self.discretization == "euler":
            jacobian += np.eye(2)
        return jacobian

    def transition_jacobian_w(self, x: np.ndarray, w: np.ndarray, k: int) -> np.ndarray:
        return _diagonal_stack(self.noise_scale, np.shape(x)[:-1])

    def observe(self, x: np.ndarray, k: int) -> np.ndarray:
        return np.array(x, dtype=float, copy=True)

    def observe_jacobian(self, x: np.ndarray, k: int) -> np.ndarray:
        return _diagonal_stack(np.ones(2), np.shape(x)[:-1])

    def domain_guard(self, x: np.ndarray):
        x = np.asarray(x, dtype=float)
        inside = np.all(np.isfinite(x), axis=-1) & (x[..., 0] > 0) & (x[..., 1] > 0)
        return bool(inside) if np.ndim(inside) == 0 else inside


# --- bearing-only tracking ------------------------------------------------


def _guarded_arctan(numerator: np.ndarray, denominator: np.ndarray) -> np.ndarray:
    """Principal ``arctan(n / d)`` in ``(-pi / 2, pi / 2]``.

    ``arctan(n / 0) = sign(n) pi / 2`` and ``arctan(0 / 0) = 0``; the lower end
    ``-pi / 2`` names the same line as ``pi / 2`` and is reported as such.
    """
    zero = denominator == 0
    with np.errstate(divide="ignore", invalid="ignore"):
        angle = np.arctan(numerator / np.where(zero, 1.0, denominator))
    edge = np.where(numerator == 0, 0.0, np.sign(numerator) * (np.pi / 2.0))
    angle = np.where(zero, edge, angle)
    return np.where(angle <= -np.pi / 2.0, np.pi / 2.0, angle)


def bearing_transition(
    x: np.ndarray,
    w: np.ndarray,
    dt: float = 0.3,
    alpha: float = 3.0,
    velocity: Sequence[float] = (0.05, 0.05, 0.05),
    sigma: Sequence[float] = (0.1, 0.1, 0.1, 0.01, 0.01, 0.01),
) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    v1, v2, v3 = velocity
    drift = np.stack(
        [
            x[..., 0] + x[..., 3] * dt,
            x[..., 1] + np.sin(alpha * x[..., 4]) * dt,
            x[..., 2] + x[..., 5] ** 2 * dt,
            x[..., 3] + v1 * dt,
            x[..., 4] + v2 * dt,
            x[..., 5] + v3 * dt,
        ],
        axis=-1,
    )
    return drift + np.asarray(sigma) * np.asarray(w, dtype=float)


def bearing_observe(
    x: np.ndarray,
    platforms: Sequence[Tuple[float, float]] = ((16.0, 6.0), (8.0, 15.0)),
) -> np.ndarray:
    """``(elevation_1, elevation_2, azimuth_1, azimuth_2)`` seen from two ground platforms."""
    x = np.asarray(x, dtype=float)
    elevations = []
    azimuths = []
    for a, b in platforms:
        dx = x[..., 0] - a
        dy = x[..., 1] - b
        elevations.append(_guarded_arctan(x[..., 2], np.sqrt(dx**2 + dy**2)))
        azimuths.append(_guarded_arctan(dx, dy))
    return np.stack(elevations + azimuths, axis=-1)


class BearingModel(StateSpaceModel):
    def __init__(
        self,
        dt: float,
        alpha: float,
        velocity: Sequence[float],
        noise_scale: Sequence[float],
        obs_scale: Sequence[float],
        platforms: Sequence[Tuple[float, float]],
    ) -> None:
        super().__init__(
            d=6,
            q=2 * len(platforms),
            state_noise=GaussianSpec.isotropic(6, dt),
            obs_noise=GaussianSpec.isotropic(2 * len(platforms), dt),
            obs_scale=np.asarray(obs_scale, dtype=float),
        )
        self.dt = float(dt)
        self.alpha = float(alpha)
        self.velocity = tuple(float(v) for v in velocity)
        self.noise_scale = np.asarray(noise_scale, dtype=float)
        self.platforms = tuple((float(a), float(b)) for a, b in platforms)

    def transition(self, x: np.ndarray, w: np.ndarray, k: int) -> np.ndarray:
        return bearing_transition(x, w, self.dt, self.alpha, self.velocity, self.noise_scale)

    def transition_jacobian_x(self, x: np.ndarray, w: np.ndarray, k: int) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        jacobian = _diagonal_stack(np.ones(6), x.shape[:-1])
        jacobian[..., 0, 3] = self.dt
        jacobian[..., 1, 4] = self.alpha * np.cos(self.alpha * x[..., 4]) * self.dt
        jacobian[..., 2, 5] = 2.0 * x[..., 5] * self.dt
        return jacobian

    def transition_jacobian_w(self, x: np.ndarray, w: np.ndarray, k: int) -> np.ndarray:
        return _diagonal_stack(self.noise_scale, np.shape(x)[:-1])

    def observe(self, x: np.ndarray, k: int) -> np.ndarray:
        return bearing_observe(x, self.platforms)


# --- linear-Gaussian ------------------------------------------------------


class LinearGaussianModel(StateSpaceModel):
    """``x' = A x + sigma ∘ w``, ``y = H x + R ∘ v``."""

    def __init__(
        self,
        transition_matrix: np.ndarray,
        observation_matrix: np.ndarray,
        noise_scale: Sequence[float],
        obs_scale: Sequence[float],
        dt: float = 1.0,
    ) -> None:
        a = np.atleast_2d(np.asarray(transition_matrix, dtype=float))
        h = np.atleast_2d(np.asarray(observation_matrix, dtype=float))
        if a.shape[0] != a.shape[1] or h.shape[1] != a.shape[0]:
            raise DimensionError(f"incompatible matrices: A {a.shape}, H {h.shape}")
        super().__init__(
            d=a.shape[0],
            q=h.shape[0],
            state_noise=GaussianSpec.isotropic(a.shape[0], dt),
            obs_noise=GaussianSpec.isotropic(h.shape[0], dt),
            obs_scale=np.asarray(obs_scale, dtype=float),
        )
        self.transition_matrix = a
        self.observation_matrix = h
        self.noise_scale = np.asarray(noise_scale, dtype=float)
        self.dt = float(dt)

    def transition(self, x: np.ndarray, w: np.ndarray, k: int) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return x @ self.transition_matrix.T + self.noise_scale * np.asarray(w, dtype=float)

    def transition_jacobian_x(self, x: np.ndarray, w: np.ndarray, k: int) -> np.ndarray:
        return np.broadcast_to(self.transition_matrix, np.shape(x)[:-1] + self.transition_matrix.shape).copy()

    def transition_jacobian_w(self, x: np.ndarray, w: np.ndarray, k: int) -> np.ndarray:
        return _diagonal_stack(self.noise_scale, np.shape(x)[:-1])

    def observe(self, x: np.ndarray, k: int) -> np.ndarray:
        return np.asarray(x, dtype=float) @ self.observation_matrix.T

    def observe_jacobian(self, x: np.ndarray, k: int) -> np.ndarray:
        h = self.observation_matrix
        return np.broadcast_to(h, np.shape(x)[:-1] + h.shape).copy()


# --- scenario parameter sets ----------------------------------------------


class Scenario:
    """Common surface of the scenario parameter sets."""

    name: str = ""
    points: int
    samples: int
    particles: int
    x0: Tuple[float, ...]

    @property
    def steps(self) -> int:
        raise NotImplementedError

    def model(self) -> StateSpaceModel:
        raise NotImplementedError

    def initial_spec(self) -> GaussianSpec:
        raise NotImplementedError

    def truth_start(self) -> np.ndarray:
        return np.asarray(self.x0, dtype=float)


@dataclass(frozen=True)
class TumorScenario(Scenario):
    name = "tumor"

    dt: float = 0.2
    n_steps: int = 40
    alpha: Tuple[float, float, float] = (1.0, 0.2, 0.2)
    noise_scale: Tuple[float, float] = (0.01, 0.01)
    obs_scale: Tuple[float, float] = (0.1, 0.1)
    x0: Tuple[float, float] = (0.8, 0.3)
    initial_mean: Tuple[float, float] = (0.78, 0.32)
    initial_std: Tuple[float, float] = (0.05, 0.1)
    discretization: str = "euler"
    points: int = 1500
    samples: int = 10
    particles: int = 15000

    @property
    def steps(self) -> int:
        return int(self.n_steps)

    def model(self) -> TumorModel:
        return TumorModel(self.dt, self.alpha, self.noise_scale, self.obs_scale, self.discretization)

    def initial_spec(self) -> GaussianSpec:
        return GaussianSpec(np.asarray(self.initial_mean), np.asarray(self.initial_std) ** 2)


@dataclass(frozen=True)
class BearingScenario(Scenario):
    name = "bearing"

    dt: float = 0.3
    horizon: float = 15.0
    alpha: float = 3.0
    velocity: Tuple[float, float, float] = (0.05, 0.05, 0.05)
    noise_scale: Tuple[float, ...] = (0.1, 0.1, 0.1, 0.01, 0.01, 0.01)
    obs_scale: Tuple[float, ...] = (0.6, 0.6, 0.6, 0.6)
    platforms: Tuple[Tuple[float, float], ...] = ((16.0, 6.0), (8.0, 15.0))
    x0: Tuple[float, ...] = (2.0, 2.0, 1.0, 0.4, 0.4, 0.0)
    initial_std: Tuple[float, ...] = (1.0, 1.0, 1.0, 0.2, 0.2, 0.2)
    points: int = 4000
    samples: int = 6
    particles: int = 15000

    @property
    def steps(self) -> int:
        return int(round(self.horizon / self.dt))

    def model(self) -> BearingModel:
        return BearingModel(self.dt, self.alpha, self.velocity, self.noise_scale, self.obs_scale, self.platforms)

    def initial_spec(self) -> GaussianSpec:
        return GaussianSpec(np.asarray(self.x0), np.asarray(self.initial_std) ** 2)


@dataclass(frozen=True)
class LinearGaussianScenario(Scenario):
    name = "linear_gaussian"

    dim: int = 1
    dt: float = 1.0
    n_steps: int = 40
    transition_matrix: Optional[Tuple[Tuple[float, ...], ...]] = None
    observation_matrix: Optional[Tuple[Tuple[float, ...], ...]] = None
    noise_scale: Optional[Tuple[float, ...]] = None
    obs_scale: Optional[Tuple[float, ...]] = None
    x0: Optional[Tuple[float, ...]] = None
    initial_mean: Optional[Tuple[float, ...]] = None
    initial_std: Optional[Tuple[float, ...]] = None
    points: int = 2000
    samples: int = 20
    particles: int = 100000

    def __post_init__(self) -> None:
        if self.dim not in (1, 2) and self.transition_matrix is None:
            raise InvalidSpecError(f"default linear-Gaussian matrices exist for dim 1 or 2, got {self.dim}")
        defaults: Dict[str, Any] = {
            "transition_matrix": ((0.9,),) if self.dim == 1 else ((0.9, 0.2), (-0.1, 0.8)),
            "observation_matrix": tuple(tuple(float(i == j) for j in range(self.dim)) for i in range(self.dim)),
            "noise_scale": (0.5,) * self.dim,
            "obs_scale": (0.5,) * self.dim,
            "x0": (1.0,) * self.dim,
            "initial_mean": (0.0,) * self.dim,
            "initial_std": (1.0,) * self.dim,
        }
        for key, value in defaults.items():
            if getattr(self, key) is None:
                object.__setattr__(self, key, value)

    @property
    def steps(self) -> int:
        return int(self.n_steps)

    def model(self) -> LinearGaussianModel:
        return LinearGaussianModel(
            self.transition_matrix, self.observation_matrix, self.noise_scale, self.obs_scale, self.dt
        )

    def initial_spec(self) -> GaussianSpec:
        return GaussianSpec(np.asarray(self.initial_mean), np.asarray(self.initial_std) ** 2)


SCENARIOS: Dict[str, Type[Scenario]] = {
    "tumor": TumorScenario,
    "bearing": BearingScenario,
    "linear_gaussian": LinearGaussianScenario,
}


def _freeze(value: Any) -> Any:
    if isinstance(value, (list, tuple)):
        return tuple(_freeze(item) for item in value)
    return value


def build_scenario(name: str, overrides: Optional[Mapping[str, Any]] = None, **switches: Any) -> Scenario:
    """Scenario ``name`` with its default parameters, patched by ``overrides`` and non-``None`` switches."""
    try:
        scenario_type = SCENARIOS[name]
    except KeyError as exc:
        raise ConfigError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}") from exc
    known = {item.name for item in dataclasses.fields(scenario_type)}
    params = dict(overrides or {})
    params.update({key: value for key, value in switches.items() if value is not None})
    unknown = sorted(set(params) - known)
    if unknown:
        raise ConfigError(f"unknown {name} scenario parameter(s): {', '.join(unknown)}")
    try:
        return scenario_type(**{key: _freeze(value) for key, value in params.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {name} scenario parameters: {exc}") from exc


def simulate_truth(scenario: Scenario, rng: RandomLike) -> TruthRecord:
    """Truth trajectory from ``x0`` and the matching noisy observations.

    State noise that would leave the model domain is redrawn (up to 100
    times); after that the realization is abandoned with ``ModelDomainError``.
    """
    generator = as_generator(rng)
    model = scenario.model()
    steps = scenario.steps
    states = np.empty((steps + 1, model.d))
    observations = np.empty((steps, model.q))
    states[0] = scenario.truth_start()
    for k in range(1, steps + 1):
        states[k] = propagate(model, states[k - 1], generator, k - 1)
        noise = model.obs_scale * sample_gaussian(model.obs_noise, generator)
        observations[k - 1] = model.observe(states[k], k) + noise
    return TruthRecord(states=states, observations=observations)
