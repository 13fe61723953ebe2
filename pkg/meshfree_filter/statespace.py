"""Discrete nonlinear state-space models, Gaussian densities and random streams.

Every transition and observation map in this package is written against
batched arrays: a state argument of shape ``(d,)`` or ``(n, d)`` yields a
result with the same leading shape. The transition is indexed by its
*source* step: ``transition(x, w, k)`` maps a state at step ``k`` to step
``k + 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Tuple, Union

import numpy as np
from scipy import linalg

from .exceptions import DimensionError, InvalidSpecError, ModelDomainError

LOG_2PI = math.log(2.0 * math.pi)
FD_RELATIVE_STEP = 1e-6
FD_MIN_STEP = 1e-6
DOMAIN_RETRY_CAP = 100


@dataclass(frozen=True)
class RandomSource:
    """Counter-based, splittable random stream.

    ``(seed, stream)`` fully determines the draw sequence of ``generator()``;
    distinct streams on the same seed come from independent Philox keys.
    """

    seed: int
    stream: Tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if not 0 <= int(self.seed) < 2**64:
            raise InvalidSpecError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        if any(int(key) < 0 for key in self.stream):
            raise InvalidSpecError(f"stream keys must be non-negative, got {self.stream}")

    def child(self, *keys: int) -> "RandomSource":
        return RandomSource(self.seed, tuple(self.stream) + tuple(int(key) for key in keys))

    def generator(self) -> np.random.Generator:
        sequence = np.random.SeedSequence(entropy=int(self.seed), spawn_key=tuple(self.stream))
        return np.random.Generator(np.random.Philox(sequence))


RandomLike = Union[RandomSource, np.random.Generator]


def as_generator(rng: RandomLike) -> np.random.Generator:
    if isinstance(rng, RandomSource):
        return rng.generator()
    return rng


@dataclass(frozen=True, eq=False)
class GaussianSpec:
    """Multivariate normal with a full or diagonal (vector) covariance."""

    mean: np.ndarray
    covariance: np.ndarray
    _factor: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        covariance = np.asarray(self.covariance, dtype=float)
        if covariance.ndim == 0:
            covariance = np.full(mean.shape, float(covariance))
        if mean.ndim != 1:
            raise DimensionError(f"mean must be a vector, got shape {mean.shape}")
        if not np.all(np.isfinite(mean)) or not np.all(np.isfinite(covariance)):
            raise InvalidSpecError("Gaussian spec entries must be finite")

        if covariance.ndim == 1:
            if covariance.shape != mean.shape:
                raise DimensionError(
                    f"diagonal covariance has length {covariance.size}, mean has length {mean.size}"
                )
            if np.any(covariance <= 0.0):
                raise InvalidSpecError("diagonal covariance entries must be positive")
            factor = np.sqrt(covariance)
        elif covariance.ndim == 2:
            if covariance.shape != (mean.size, mean.size):
                raise DimensionError(
                    f"covariance has shape {covariance.shape}, expected {(mean.size, mean.size)}"
                )
            scale = max(1.0, float(np.max(np.abs(covariance))))
            if not np.allclose(covariance, covariance.T, rtol=0.0, atol=1e-12 * scale):
                raise InvalidSpecError("covariance must be symmetric")
            try:
                factor = linalg.cholesky(covariance, lower=True)
            except linalg.LinAlgError as exc:
                raise InvalidSpecError("covariance must be positive-definite") from exc
        else:
            raise DimensionError(f"covariance must be a vector or a matrix, got ndim={covariance.ndim}")

        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", covariance)
        object.__setattr__(self, "_factor", factor)

    @classmethod
    def isotropic(cls, dim: int, variance: float) -> "GaussianSpec":
        return cls(np.zeros(dim), np.full(dim, float(variance)))

    @property
    def dim(self) -> int:
        return int(self.mean.size)

    @property
    def is_diagonal(self) -> bool:
        return self.covariance.ndim == 1

    def matrix(self) -> np.ndarray:
        if self.is_diagonal:
            return np.diag(self.covariance)
        return self.covariance.copy()

    def scaled(self, scale: np.ndarray) -> "GaussianSpec":
        """Spec of ``scale ∘ z`` for ``z`` drawn from this spec."""
        scale = np.asarray(scale, dtype=float)
        if scale.shape != self.mean.shape:
            raise DimensionError(f"scale has shape {scale.shape}, expected {self.mean.shape}")
        if self.is_diagonal:
            return GaussianSpec(scale * self.mean, scale**2 * self.covariance)
        return GaussianSpec(scale * self.mean, self.covariance * np.outer(scale, scale))


def gaussian_logpdf(spec: GaussianSpec, x: np.ndarray) -> Union[float, np.ndarray]:
    """Log density of ``spec`` at ``x``; ``x`` may carry leading batch axes."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1:] != spec.mean.shape:
        raise DimensionError(f"point has trailing shape {x.shape[-1:]}, spec has dimension {spec.dim}")
    diff = x - spec.mean
    n = spec.dim
    if spec.is_diagonal:
        log_det = float(np.sum(np.log(spec.covariance)))
        mahalanobis = np.sum(diff**2 / spec.covariance, axis=-1)
    else:
        factor = spec._factor
        log_det = 2.0 * float(np.sum(np.log(np.diag(factor))))
        flat = diff.reshape(-1, n).T
        solved = linalg.solve_triangular(factor, flat, lower=True)
        mahalanobis = np.sum(solved**2, axis=0).reshape(diff.shape[:-1])
    result = -0.5 * (n * LOG_2PI + log_det + mahalanobis)
    if np.ndim(result) == 0:
        return float(result)
    return result


def sample_gaussian(spec: GaussianSpec, rng: RandomLike, size: Optional[int] = None) -> np.ndarray:
    """One draw (``size=None``) or ``size`` stacked draws from ``spec``."""
    generator = as_generator(rng)
    shape = (spec.dim,) if size is None else (int(size), spec.dim)
    standard = generator.standard_normal(shape)
    if spec.is_diagonal:
        return spec.mean + spec._factor * standard
    return spec.mean + standard @ spec._factor.T


def sample_in_domain(
    spec: GaussianSpec,
    rng: RandomLike,
    size: int,
    model: Optional["StateSpaceModel"] = None,
    max_retries: int = DOMAIN_RETRY_CAP,
) -> np.ndarray:
    """``size`` draws from ``spec``; draws outside ``model``'s domain are redrawn."""
    generator = as_generator(rng)
    draws = sample_gaussian(spec, generator, size=size)
    if model is None:
        return draws
    pending = np.flatnonzero(~np.atleast_1d(model.domain_guard(draws)))
    for _ in range(max_retries):
        if pending.size == 0:
            return draws
        draws[pending] = sample_gaussian(spec, generator, size=pending.size)
        pending = pending[~np.atleast_1d(model.domain_guard(draws[pending]))]
    if pending.size:
        raise ModelDomainError(
            f"initial distribution keeps drawing outside the model domain after {max_retries} redraws",
            node=draws[pending[0]].copy(),
        )
    return draws


def finite_difference_jacobian(
    func: Callable[[np.ndarray], np.ndarray],
    x: np.ndarray,
    relative_step: float = FD_RELATIVE_STEP,
) -> np.ndarray:
    """Central-difference Jacobian of a batched map.

    ``x`` has shape ``(d,)`` or ``(n, d)``; the result has shape ``(m, d)`` or
    ``(n, m, d)``. The step per coordinate is ``max(1e-6, 1e-6 * |x_i|)``.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    points = np.atleast_2d(x)
    steps = np.maximum(FD_MIN_STEP, relative_step * np.abs(points))
    columns = []
    for i in range(points.shape[1]):
        forward = points.copy()
        backward = points.copy()
        forward[:, i] += steps[:, i]
        backward[:, i] -= steps[:, i]
        delta = np.atleast_2d(func(forward)) - np.atleast_2d(func(backward))
        columns.append(delta / (2.0 * steps[:, i : i + 1]))
    jacobian = np.stack(columns, axis=-1)
    return jacobian[0] if single else jacobian


class StateSpaceModel:
    """Discrete model ``X_{k+1} = f_k(X_k, w_k)``, ``Y_k = g_k(X_k) + R ∘ v_k``.

    Subclasses implement ``transition`` and ``observe``; the analytic
    Jacobian hooks return ``None`` to request finite differences.
    """

    def __init__(
        self,
        d: int,
        q: int,
        state_noise: GaussianSpec,
        obs_noise: GaussianSpec,
        obs_scale: np.ndarray,
    ) -> None:
        obs_scale = np.asarray(obs_scale, dtype=float)
        if obs_scale.shape != (obs_noise.dim,):
            raise DimensionError(f"obs_scale has shape {obs_scale.shape}, expected ({obs_noise.dim},)")
        if q != obs_noise.dim:
            raise DimensionError(f"additive observation noise needs s == q, got s={obs_noise.dim}, q={q}")
        self.d = int(d)
        self.q = int(q)
        self.r = state_noise.dim
        self.s = obs_noise.dim
        self.state_noise = state_noise
        self.obs_noise = obs_noise
        self.obs_scale = obs_scale

    def transition(self, x: np.ndarray, w: np.ndarray, k: int) -> np.ndarray:
        raise NotImplementedError

    def observe(self, x: np.ndarray, k: int) -> np.ndarray:
        raise NotImplementedError

    def transition_jacobian_x(self, x: np.ndarray, w: np.ndarray, k: int) -> Optional[np.ndarray]:
        return None

    def transition_jacobian_w(self, x: np.ndarray, w: np.ndarray, k: int) -> Optional[np.ndarray]:
        return None

    def observe_jacobian(self, x: np.ndarray, k: int) -> Optional[np.ndarray]:
        return None

    def domain_guard(self, x: np.ndarray) -> Union[bool, np.ndarray]:
        x = np.asarray(x, dtype=float)
        inside = np.all(np.isfinite(x), axis=-1)
        return bool(inside) if np.ndim(inside) == 0 else inside

    def observation_spec(self) -> GaussianSpec:
        """Spec of the additive observation error ``R ∘ v``."""
        return self.obs_noise.scaled(self.obs_scale)

    def zero_noise(self, n: Optional[int] = None) -> np.ndarray:
        return np.zeros(self.r) if n is None else np.zeros((n, self.r))


def jacobian_x(
    model: StateSpaceModel,
    x: np.ndarray,
    w: np.ndarray,
    k: int,
    relative_step: float = FD_RELATIVE_STEP,
) -> np.ndarray:
    analytic = model.transition_jacobian_x(x, w, k)
    if analytic is not None:
        return analytic
    return finite_difference_jacobian(lambda z: model.transition(z, w, k), x, relative_step)


def jacobian_w(model: StateSpaceModel, x: np.ndarray, w: np.ndarray, k: int) -> np.ndarray:
    analytic = model.transition_jacobian_w(x, w, k)
    if analytic is not None:
        return analytic
    return finite_difference_jacobian(lambda z: model.transition(x, z, k), w)


def observation_jacobian(model: StateSpaceModel, x: np.ndarray, k: int) -> np.ndarray:
    analytic = model.observe_jacobian(x, k)
    if analytic is not None:
        return analytic
    return finite_difference_jacobian(lambda z: model.observe(z, k), x)


def observation_loglik(model: StateSpaceModel, y: np.ndarray, x: np.ndarray, k: int) -> np.ndarray:
    """``log p(y | x)`` for every row of ``x``."""
    y = np.asarray(y, dtype=float)
    if y.shape != (model.q,):
        raise DimensionError(f"observation has shape {y.shape}, expected ({model.q},)")
    return gaussian_logpdf(model.observation_spec(), y - model.observe(x, k))


def propagate_rows(
    model: StateSpaceModel,
    x: np.ndarray,
    rng: RandomLike,
    k: int,
    max_retries: int = DOMAIN_RETRY_CAP,
) -> Tuple[np.ndarray, np.ndarray]:
    """Push every row of ``x`` through the transition with fresh noise.

    Rows whose image leaves the admissible domain get new noise, up to
    ``max_retries`` redraws. Returns the images and a mask of the rows that
    were still outside after the last redraw; their images are not usable.
    """
    generator = as_generator(rng)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    start_ok = np.atleast_1d(model.domain_guard(x))
    if not np.all(start_ok):
        bad = int(np.flatnonzero(~start_ok)[0])
        raise ModelDomainError(f"state {x[bad]} is outside the model domain", node=x[bad].copy())

    noise = sample_gaussian(model.state_noise, generator, size=x.shape[0])
    result = model.transition(x, noise, k)
    pending = np.flatnonzero(~np.atleast_1d(model.domain_guard(result)))
    for _ in range(max_retries):
        if pending.size == 0:
            break
        noise = sample_gaussian(model.state_noise, generator, size=pending.size)
        result[pending] = model.transition(x[pending], noise, k)
        pending = pending[~np.atleast_1d(model.domain_guard(result[pending]))]
    stuck = np.zeros(x.shape[0], dtype=bool)
    stuck[pending] = True
    return result, stuck


def propagate_batch(
    model: StateSpaceModel,
    x: np.ndarray,
    rng: RandomLike,
    k: int,
    max_retries: int = DOMAIN_RETRY_CAP,
) -> np.ndarray:
    """Like ``propagate_rows`` but a row that never re-enters the domain raises ``ModelDomainError``."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    result, stuck = propagate_rows(model, x, rng, k, max_retries)
    if np.any(stuck):
        node = x[np.flatnonzero(stuck)[0]].copy()
        raise ModelDomainError(
            f"could not keep the image of {node} inside the model domain after {max_retries} redraws",
            node=node,
        )
    return result


def propagate(model: StateSpaceModel, x: np.ndarray, rng: RandomLike, k: int) -> np.ndarray:
    return propagate_batch(model, np.asarray(x, dtype=float)[np.newaxis, :], rng, k)[0]
