"""Reference filters: bootstrap particle filter and extended Kalman filter."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy import linalg

from .exceptions import DimensionError, DivergenceError, InvalidSpecError
from .logging_utils import SILENT, DiagnosticLog
from .statespace import (
    GaussianSpec,
    RandomLike,
    RandomSource,
    StateSpaceModel,
    as_generator,
    jacobian_w,
    jacobian_x,
    observation_jacobian,
    observation_loglik,
    propagate_rows,
    sample_in_domain,
)

NORMALIZATION_TOL = 1e-10
SYMMETRY_TOL = 1e-10
CONDITION_LIMIT = 1e14

STREAM_INIT = 0
STREAM_PROPAGATE = 1
STREAM_RESAMPLE = 2


@dataclass(frozen=True, eq=False)
class ParticleEnsemble:
    particles: np.ndarray
    weights: np.ndarray

    def __post_init__(self) -> None:
        particles = np.atleast_2d(np.asarray(self.particles, dtype=float))
        weights = np.asarray(self.weights, dtype=float)
        if weights.shape != (particles.shape[0],):
            raise DimensionError(f"{particles.shape[0]} particles but weights of shape {weights.shape}")
        if np.any(weights < 0) or abs(float(np.sum(weights)) - 1.0) > NORMALIZATION_TOL:
            raise InvalidSpecError("particle weights must be non-negative and sum to 1")
        object.__setattr__(self, "particles", particles)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def from_prior(
        cls, p0: GaussianSpec, count: int, rng: RandomLike, model: Optional[StateSpaceModel] = None
    ) -> "ParticleEnsemble":
        if count < 1:
            raise InvalidSpecError(f"particle count must be at least 1, got {count}")
        return cls(sample_in_domain(p0, rng, count, model), np.full(count, 1.0 / count))

    @property
    def size(self) -> int:
        return int(self.particles.shape[0])

    def estimate(self) -> np.ndarray:
        return self.weights @ self.particles


def systematic_resample(weights: np.ndarray, rng: RandomLike) -> np.ndarray:
    """Ancestor indices from one uniform offset and ``P`` evenly spaced pointers."""
    weights = np.asarray(weights, dtype=float)
    count = weights.size
    positions = (np.arange(count) + as_generator(rng).random()) / count
    cumulative = np.cumsum(weights)
    cumulative /= cumulative[-1]
    return np.minimum(np.searchsorted(cumulative, positions, side="right"), count - 1)


def pf_weight(
    ensemble: ParticleEnsemble,
    model: StateSpaceModel,
    observation: np.ndarray,
    rng: RandomLike,
    k: int,
    log: DiagnosticLog = SILENT,
) -> ParticleEnsemble:
    """Propagate every particle with fresh noise and weight it by the likelihood of ``observation``.

    A particle whose image cannot be kept inside the model domain stays where
    it was and gets weight zero.
    """
    particles, stuck = propagate_rows(model, ensemble.particles, rng, k - 1)
    if np.any(stuck):
        log.warning(f"step {k}: {int(stuck.sum())} particle(s) left the model domain; weighting them zero")
        particles[stuck] = ensemble.particles[stuck]
    with np.errstate(divide="ignore"):
        log_weights = observation_loglik(model, observation, particles, k) + np.log(ensemble.weights)
    log_weights[stuck] = -np.inf
    finite = np.isfinite(log_weights)
    if not np.any(finite):
        raise DivergenceError("ensemble divergence")
    weights = np.zeros(ensemble.size)
    weights[finite] = np.exp(log_weights[finite] - np.max(log_weights[finite]))
    total = float(np.sum(weights))
    if not total > 0:
        raise DivergenceError("ensemble divergence")
    return ParticleEnsemble(particles, weights / total)


def pf_step(
    ensemble: ParticleEnsemble,
    model: StateSpaceModel,
    observation: np.ndarray,
    rng: RandomSource,
    k: int,
) -> ParticleEnsemble:
    weighted = pf_weight(ensemble, model, observation, rng.child(STREAM_PROPAGATE, k), k)
    ancestors = systematic_resample(weighted.weights, rng.child(STREAM_RESAMPLE, k))
    return ParticleEnsemble(weighted.particles[ancestors], np.full(weighted.size, 1.0 / weighted.size))


@dataclass
class BaselineRun:
    estimates: np.ndarray
    resampled: np.ndarray


class ParticleFilter:
    """Bootstrap particle filter with systematic resampling at every step."""

    def __init__(self, model: StateSpaceModel, particles: int, log: DiagnosticLog = SILENT) -> None:
        if particles < 1:
            raise InvalidSpecError(f"particle count must be at least 1, got {particles}")
        self.model = model
        self.particles = int(particles)
        self.log = log

    def run(self, observations: np.ndarray, p0: GaussianSpec, rng: RandomSource) -> BaselineRun:
        ensemble = ParticleEnsemble.from_prior(p0, self.particles, rng.child(STREAM_INIT), self.model)
        estimates = np.empty((len(observations), self.model.d))
        for k, observation in enumerate(observations, start=1):
            weighted = pf_weight(ensemble, self.model, observation, rng.child(STREAM_PROPAGATE, k), k, self.log)
            estimates[k - 1] = weighted.estimate()
            ancestors = systematic_resample(weighted.weights, rng.child(STREAM_RESAMPLE, k))
            ensemble = ParticleEnsemble(weighted.particles[ancestors], np.full(self.particles, 1.0 / self.particles))
        return BaselineRun(estimates=estimates, resampled=np.ones(len(observations), dtype=bool))


@dataclass(frozen=True, eq=False)
class EkfBelief:
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self) -> None:
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        covariance = np.atleast_2d(np.asarray(self.covariance, dtype=float))
        if covariance.shape != (mean.size, mean.size):
            raise DimensionError(f"covariance has shape {covariance.shape}, expected {(mean.size, mean.size)}")
        if not np.allclose(covariance, covariance.T, rtol=0.0, atol=SYMMETRY_TOL):
            raise InvalidSpecError("EKF covariance must be symmetric")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", covariance)

    @classmethod
    def from_prior(cls, p0: GaussianSpec) -> "EkfBelief":
        return cls(p0.mean.copy(), p0.matrix())


def _symmetric(matrix: np.ndarray) -> np.ndarray:
    return 0.5 * (matrix + matrix.T)


def ekf_predict(belief: EkfBelief, model: StateSpaceModel, k: int) -> Tuple[np.ndarray, np.ndarray]:
    """Predicted mean and covariance for step ``k`` from the step ``k - 1`` belief."""
    noise = model.zero_noise()
    mean = model.transition(belief.mean, noise, k - 1)
    f = jacobian_x(model, belief.mean, noise, k - 1)
    g = jacobian_w(model, belief.mean, noise, k - 1)
    process = g @ model.state_noise.matrix() @ g.T
    return mean, _symmetric(f @ belief.covariance @ f.T + process)


def ekf_step(belief: EkfBelief, model: StateSpaceModel, observation: np.ndarray, k: int) -> EkfBelief:
    observation = np.asarray(observation, dtype=float)
    if observation.shape != (model.q,):
        raise DimensionError(f"observation has shape {observation.shape}, expected ({model.q},)")
    mean, covariance = ekf_predict(belief, model, k)
    h = observation_jacobian(model, mean, k)
    noise = model.observation_spec().matrix()
    innovation_cov = _symmetric(h @ covariance @ h.T + noise)
    if not np.all(np.isfinite(innovation_cov)) or np.linalg.cond(innovation_cov) > CONDITION_LIMIT:
        raise DivergenceError("innovation covariance is not invertible")
    try:
        gain = linalg.solve(innovation_cov, h @ covariance, assume_a="sym").T
    except linalg.LinAlgError as exc:
        raise DivergenceError("innovation covariance is not invertible") from exc

    innovation = observation - model.observe(mean, k)
    updated_mean = mean + gain @ innovation
    joseph = np.eye(model.d) - gain @ h
    updated_cov = joseph @ covariance @ joseph.T + gain @ noise @ gain.T
    return EkfBelief(updated_mean, _symmetric(updated_cov))


class ExtendedKalmanFilter:
    def __init__(self, model: StateSpaceModel, log: DiagnosticLog = SILENT) -> None:
        self.model = model
        self.log = log

    def run(self, observations: np.ndarray, p0: GaussianSpec, rng: Optional[RandomSource] = None) -> BaselineRun:
        belief = EkfBelief.from_prior(p0)
        estimates = np.empty((len(observations), self.model.d))
        for k, observation in enumerate(observations, start=1):
            belief = ekf_step(belief, self.model, observation, k)
            estimates[k - 1] = belief.mean
        return BaselineRun(estimates=estimates, resampled=np.zeros(len(observations), dtype=bool))
