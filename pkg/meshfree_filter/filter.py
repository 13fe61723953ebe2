"""Meshfree implicit filter.

One step of the filter, from the posterior cloud at step ``k - 1``:

1. measure degeneracy as the fraction of nodes whose value is below ``epsilon``;
2. if that fraction reaches ``tau``, move the degenerate nodes next to
   surviving ones (the intermediate set), otherwise keep the nodes;
3. propagate the nodes through the state model to get the new node set;
4. prediction: for every new node draw ``M`` noise samples, solve the state
   equation backwards for each and average the step ``k - 1`` interpolant
   over the converged pre-images;
5. update: multiply by the observation likelihood and normalize.

Node values are a normalized discrete distribution over the nodes. The
nodes themselves are a sample of a moving law, so every state also carries
``node_density``, the density the nodes were drawn from, evaluated at the
nodes. The interpolant holds ``value * node_density``, the posterior density
up to a constant, and the prior mass of a new node is its predictive density
over its own node density. Both densities come out of the same pre-images.
"""

from __future__ import annotations

import dataclasses
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Tuple

import numpy as np

from .exceptions import DimensionError, DivergenceError, InvalidSpecError, ModelDomainError
from .interpolation import ShepardConfig, ShepardInterpolant
from .logging_utils import SILENT, DiagnosticLog
from .solvers import SolveConfig, implicit_solve_batch
from .statespace import (
    DOMAIN_RETRY_CAP,
    GaussianSpec,
    RandomLike,
    RandomSource,
    StateSpaceModel,
    as_generator,
    gaussian_logpdf,
    observation_loglik,
    propagate_rows,
    sample_gaussian,
    sample_in_domain,
)

STREAM_INIT = 0
STREAM_PROPAGATE = 1
STREAM_PREDICT = 2
STREAM_RESAMPLE = 3
STREAM_RESEED = 4

NOISE_MODES = ("per_node", "shared")
NORMALIZATION_TOL = 1e-10
RESEED_ROUNDS = 3


@dataclass(frozen=True, eq=False)
class PointCloud:
    step: int
    nodes: np.ndarray
    values: np.ndarray

    def __post_init__(self) -> None:
        nodes = np.atleast_2d(np.asarray(self.nodes, dtype=float))
        values = np.asarray(self.values, dtype=float)
        if values.shape != (nodes.shape[0],):
            raise DimensionError(f"{nodes.shape[0]} nodes but values of shape {values.shape}")
        if np.any(values < 0):
            raise InvalidSpecError("cloud values must be non-negative")
        if abs(float(np.sum(values)) - 1.0) > NORMALIZATION_TOL:
            raise InvalidSpecError(f"cloud values must sum to 1, got {np.sum(values)!r}")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "values", values)

    @property
    def size(self) -> int:
        return int(self.nodes.shape[0])

    @property
    def dim(self) -> int:
        return int(self.nodes.shape[1])


@dataclass(frozen=True)
class FilterConfig:
    points: int = 1000
    samples: int = 10
    shepard: ShepardConfig = ShepardConfig()
    solve: SolveConfig = SolveConfig()
    epsilon: Optional[float] = None
    tau: float = 0.2
    jitter_scale: float = 1.0
    noise_mode: str = "per_node"
    chunk_nodes: int = 2048
    workers: int = 1

    def __post_init__(self) -> None:
        if self.points < 1:
            raise InvalidSpecError(f"points must be at least 1, got {self.points}")
        if self.samples < 1:
            raise InvalidSpecError(f"samples must be at least 1, got {self.samples}")
        if self.epsilon is not None and not self.epsilon > 0:
            raise InvalidSpecError(f"epsilon must be positive, got {self.epsilon}")
        if not 0.0 <= self.tau <= 1.0:
            raise InvalidSpecError(f"tau must lie in [0, 1], got {self.tau}")
        if self.jitter_scale < 0:
            raise InvalidSpecError(f"jitter_scale must be non-negative, got {self.jitter_scale}")
        if self.noise_mode not in NOISE_MODES:
            raise InvalidSpecError(f"noise_mode must be one of {NOISE_MODES}, got {self.noise_mode!r}")
        if self.chunk_nodes < 1 or self.workers < 1:
            raise InvalidSpecError("chunk_nodes and workers must be positive")

    @property
    def threshold(self) -> float:
        """Degeneracy threshold on the normalized scale (default 1% of the uniform weight)."""
        return self.epsilon if self.epsilon is not None else 0.01 / self.points


@dataclass
class FilterDiagnostics:
    resample_events: int = 0
    resample_fallbacks: int = 0
    failed_solves: int = 0
    starved_nodes: int = 0
    reseeded_nodes: int = 0
    resample_flags: List[bool] = field(default_factory=list)


@dataclass(frozen=True, eq=False)
class FilterState:
    cloud: PointCloud
    interpolant: ShepardInterpolant
    node_density: np.ndarray
    resampled: bool = False
    diagnostics: FilterDiagnostics = field(default_factory=FilterDiagnostics)

    @classmethod
    def from_cloud(
        cls,
        cloud: PointCloud,
        node_density: Optional[np.ndarray] = None,
        shepard: ShepardConfig = ShepardConfig(),
        resampled: bool = False,
        diagnostics: Optional[FilterDiagnostics] = None,
    ) -> "FilterState":
        """State over ``cloud`` whose nodes were drawn from ``node_density`` (uniform when omitted)."""
        if node_density is None:
            node_density = np.ones(cloud.size)
        node_density = np.asarray(node_density, dtype=float)
        if node_density.shape != (cloud.size,):
            raise DimensionError(f"{cloud.size} nodes but node density of shape {node_density.shape}")
        if not np.all(np.isfinite(node_density)) or np.any(node_density <= 0):
            raise InvalidSpecError("node density must be positive and finite")
        node_density = node_density / np.max(node_density)
        return cls(
            cloud=cloud,
            interpolant=ShepardInterpolant(cloud.nodes, cloud.values * node_density, shepard),
            node_density=node_density,
            resampled=resampled,
            diagnostics=diagnostics if diagnostics is not None else FilterDiagnostics(),
        )


def init_cloud(
    p0: GaussianSpec, n: int, rng: RandomLike, model: Optional[StateSpaceModel] = None
) -> PointCloud:
    """N draws from ``p0`` with uniform values; draws outside ``model``'s domain are redrawn."""
    if n < 1:
        raise InvalidSpecError(f"cloud size must be at least 1, got {n}")
    nodes = sample_in_domain(p0, rng, n, model)
    return PointCloud(step=0, nodes=nodes, values=np.full(n, 1.0 / n))


def degeneracy_ratio(cloud: PointCloud, epsilon: float) -> float:
    return float(np.count_nonzero(cloud.values < epsilon)) / cloud.size


def cloud_covariance(cloud: PointCloud) -> np.ndarray:
    return _weighted_covariance(cloud.nodes, cloud.values)


def cloud_std(cloud: PointCloud) -> np.ndarray:
    return np.sqrt(np.diag(cloud_covariance(cloud)))


def _weighted_covariance(nodes: np.ndarray, weights: np.ndarray) -> np.ndarray:
    total = float(np.sum(weights))
    weights = weights / total if total > 0 else np.full(len(weights), 1.0 / len(weights))
    centered = nodes - weights @ nodes
    return (centered * weights[:, np.newaxis]).T @ centered


def posterior_mean(cloud: PointCloud) -> np.ndarray:
    return cloud.values @ cloud.nodes


def posterior_expectation(cloud: PointCloud, phi: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    """``sum_i value_i * phi(node_i)`` for a test function evaluated row-wise."""
    return np.tensordot(cloud.values, np.asarray(phi(cloud.nodes), dtype=float), axes=(0, 0))


def donor_probabilities(values: np.ndarray, epsilon: float) -> np.ndarray:
    """Chance of each node to donate a replacement: survivors in proportion to their values.

    When no node reaches ``epsilon`` the whole cloud donates, uniformly if
    every value is zero.
    """
    values = np.asarray(values, dtype=float)
    keep = values >= epsilon
    if np.any(keep):
        weights = np.where(keep, values, 0.0)
    else:
        weights = values if np.sum(values) > 0 else np.ones(values.size)
    return weights / np.sum(weights)


def resample(
    cloud: PointCloud,
    epsilon: float,
    jitter_scale: float,
    rng: RandomLike,
    model: Optional[StateSpaceModel] = None,
    log: DiagnosticLog = SILENT,
) -> np.ndarray:
    """Intermediate node set: degenerate nodes replaced by jittered copies of survivors.

    Nodes with value ``>= epsilon`` are returned unchanged. Each degenerate
    node becomes ``node_c + jitter`` with ``c`` drawn among the survivors in
    proportion to their values and a Gaussian jitter whose bandwidth per
    dimension is ``jitter_scale * std_m * N ** (-1 / (d + 4))``.
    """
    generator = as_generator(rng)
    nodes = cloud.nodes
    values = cloud.values
    keep = values >= epsilon
    out = nodes.copy()
    if np.all(keep):
        return out
    if not np.any(keep):
        log.warning(
            f"step {cloud.step}: every node is below epsilon={epsilon:.3g}; resampling over the whole cloud"
        )
    probabilities = donor_probabilities(values, epsilon)
    donors = np.flatnonzero(probabilities > 0)
    replaced = np.flatnonzero(~keep)

    chosen = generator.choice(donors, size=replaced.size, p=probabilities[donors])
    bandwidth = jitter_scale * np.sqrt(np.diag(_weighted_covariance(nodes, values)))
    bandwidth = bandwidth * cloud.size ** (-1.0 / (cloud.dim + 4))
    out[replaced] = nodes[chosen] + bandwidth * generator.standard_normal((replaced.size, cloud.dim))

    if model is not None:
        outside = np.flatnonzero(~np.atleast_1d(model.domain_guard(out[replaced])))
        for _ in range(DOMAIN_RETRY_CAP):
            if outside.size == 0:
                break
            rows = replaced[outside]
            out[rows] = nodes[chosen[outside]] + bandwidth * generator.standard_normal((outside.size, cloud.dim))
            outside = outside[~np.atleast_1d(model.domain_guard(out[rows]))]
        if outside.size:
            out[replaced[outside]] = nodes[chosen[outside]]
    return out


def intermediate_density(cloud: PointCloud, node_density: np.ndarray, epsilon: float) -> np.ndarray:
    """Sampling density of the intermediate set at the cloud nodes, up to a constant.

    Kept nodes carry the cloud's own node density; the replacements add
    ``n_replaced * donor probability`` of it at every donor. Jitter is
    neglected.
    """
    node_density = np.asarray(node_density, dtype=float)
    keep = cloud.values >= epsilon
    if np.all(keep):
        return node_density.copy()
    replaced = np.count_nonzero(~keep)
    return node_density * (keep + replaced * donor_probabilities(cloud.values, epsilon))


def _prediction_noise(model: StateSpaceModel, cfg: FilterConfig, rng: RandomSource, k: int, n: int) -> np.ndarray:
    """``(n, M, r)`` noise; node ``i`` reads rows ``[i M, (i + 1) M)`` of the step's stream."""
    generator = rng.child(STREAM_PREDICT, k).generator()
    if cfg.noise_mode == "shared":
        shared = sample_gaussian(model.state_noise, generator, size=cfg.samples)
        return np.broadcast_to(shared, (n,) + shared.shape)
    return sample_gaussian(model.state_noise, generator, size=n * cfg.samples).reshape(n, cfg.samples, model.r)


def _pre_image_means(
    interpolant: ShepardInterpolant,
    table: np.ndarray,
    nodes: np.ndarray,
    model: StateSpaceModel,
    cfg: FilterConfig,
    rng: RandomSource,
    k: int,
) -> Tuple[np.ndarray, int]:
    """Average of every column of ``table`` (interpolated) over each node's converged pre-images.

    Rows of nodes without a converged pre-image are NaN. Also returns the
    number of failed solves.
    """
    n, m = nodes.shape[0], cfg.samples
    columns = interpolant.with_values(table)
    width = table.shape[1]
    noise = _prediction_noise(model, cfg, rng, k, n)

    def evaluate(rows: np.ndarray) -> Tuple[np.ndarray, int]:
        targets = np.repeat(nodes[rows], m, axis=0)
        solved = implicit_solve_batch(model, targets, noise[rows].reshape(-1, model.r), k - 1, targets, cfg.solve)
        values = np.zeros((targets.shape[0], width))
        if np.any(solved.converged):
            values[solved.converged] = columns(solved.roots[solved.converged])
        converged = solved.converged.reshape(rows.size, m)
        counts = converged.sum(axis=1)
        sums = (values.reshape(rows.size, m, width) * converged[:, :, np.newaxis]).sum(axis=1)
        means = np.full((rows.size, width), np.nan)
        means[counts > 0] = sums[counts > 0] / counts[counts > 0, np.newaxis]
        return means, int(converged.size - counts.sum())

    chunks = [np.arange(start, min(start + cfg.chunk_nodes, n)) for start in range(0, n, cfg.chunk_nodes)]
    if cfg.workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as executor:
            results = list(executor.map(evaluate, chunks))
    else:
        results = [evaluate(rows) for rows in chunks]
    return np.concatenate([means for means, _ in results]), sum(failed for _, failed in results)


def _fill_starved(values: np.ndarray, starved: np.ndarray) -> float:
    positive = values[~starved & (values > 0)]
    fill = float(positive.min()) if positive.size else 0.0
    values[starved] = fill
    return fill


def predict(
    state: FilterState,
    nodes: np.ndarray,
    model: StateSpaceModel,
    cfg: FilterConfig,
    rng: RandomSource,
    k: int,
    diagnostics: Optional[FilterDiagnostics] = None,
    log: DiagnosticLog = SILENT,
) -> np.ndarray:
    """Unnormalized prior density at the step-``k`` nodes.

    Pre-images that fail to converge are dropped from their node's average;
    a node with no converged pre-image receives the smallest positive prior
    value of the step.
    """
    nodes = np.atleast_2d(np.asarray(nodes, dtype=float))
    means, failed = _pre_image_means(
        state.interpolant, state.interpolant.values[:, np.newaxis], nodes, model, cfg, rng, k
    )
    prior = means[:, 0]
    starved = np.isnan(prior)
    if np.any(starved):
        fill = _fill_starved(prior, starved)
        log.warning(
            f"step {k}: {int(starved.sum())} node(s) had no converged pre-image among {cfg.samples} samples; "
            f"assigned prior value {fill:.3g}"
        )
    if diagnostics is not None:
        diagnostics.failed_solves += failed
        diagnostics.starved_nodes += int(starved.sum())
    return prior


def predict_masses(
    state: FilterState,
    nodes: np.ndarray,
    seed_density: np.ndarray,
    model: StateSpaceModel,
    cfg: FilterConfig,
    rng: RandomSource,
    k: int,
    diagnostics: Optional[FilterDiagnostics] = None,
    log: DiagnosticLog = SILENT,
) -> Tuple[np.ndarray, np.ndarray]:
    """Unnormalized prior masses and the node density at the step-``k`` nodes.

    ``seed_density`` is the density the propagated seeds were drawn from, at
    the step ``k - 1`` nodes. The prior mass of a node is its predictive
    density over its node density. Nodes without a usable pre-image receive
    the smallest positive mass and node density of the step.
    """
    nodes = np.atleast_2d(np.asarray(nodes, dtype=float))
    table = np.column_stack([state.interpolant.values, np.asarray(seed_density, dtype=float)])
    means, failed = _pre_image_means(state.interpolant, table, nodes, model, cfg, rng, k)
    prior, density = means[:, 0], means[:, 1]
    starved = ~(np.isfinite(density) & (density > 0))
    masses = np.zeros(nodes.shape[0])
    masses[~starved] = prior[~starved] / density[~starved]
    if np.any(starved):
        fill = _fill_starved(masses, starved)
        _fill_starved(density, starved)
        log.warning(
            f"step {k}: {int(starved.sum())} node(s) had no usable pre-image among {cfg.samples} samples; "
            f"assigned prior mass {fill:.3g}"
        )
    if diagnostics is not None:
        diagnostics.failed_solves += failed
        diagnostics.starved_nodes += int(starved.sum())
    return masses, density


def bayes_update(prior: np.ndarray, log_likelihood: np.ndarray) -> np.ndarray:
    """Normalized ``likelihood * prior`` computed in log space."""
    prior = np.asarray(prior, dtype=float)
    log_likelihood = np.asarray(log_likelihood, dtype=float)
    if prior.shape != log_likelihood.shape:
        raise DimensionError(f"prior shape {prior.shape} does not match likelihood shape {log_likelihood.shape}")
    if np.any(prior < 0):
        raise InvalidSpecError("prior values must be non-negative")
    with np.errstate(divide="ignore"):
        log_posterior = log_likelihood + np.log(prior)
    finite = np.isfinite(log_posterior)
    if not np.any(finite):
        raise DivergenceError("observation incompatible with cloud")
    posterior = np.zeros_like(prior)
    posterior[finite] = np.exp(log_posterior[finite] - np.max(log_posterior[finite]))
    return posterior / np.sum(posterior)


def update(
    prior: np.ndarray,
    nodes: np.ndarray,
    observation: np.ndarray,
    model: StateSpaceModel,
    k: int,
) -> np.ndarray:
    return bayes_update(prior, observation_loglik(model, observation, nodes, k))


def initial_state(
    p0: GaussianSpec, cfg: FilterConfig, rng: RandomSource, model: Optional[StateSpaceModel] = None
) -> FilterState:
    cloud = init_cloud(p0, cfg.points, rng.child(STREAM_INIT), model)
    log_density = np.atleast_1d(gaussian_logpdf(p0, cloud.nodes))
    return FilterState.from_cloud(cloud, np.exp(log_density - np.max(log_density)), cfg.shepard)


def propagate_seeds(
    seeds: np.ndarray,
    model: StateSpaceModel,
    cfg: FilterConfig,
    rng: RandomSource,
    k: int,
    diagnostics: Optional[FilterDiagnostics] = None,
    log: DiagnosticLog = SILENT,
) -> np.ndarray:
    """Step-``k`` nodes from the seeds.

    A seed whose image cannot be kept inside the model domain is replaced by
    a jittered copy of a surviving seed, drawn through ``resample``, and
    propagated again; after three such rounds ``ModelDomainError`` is raised.
    """
    seeds = np.atleast_2d(np.asarray(seeds, dtype=float)).copy()
    nodes, stuck = propagate_rows(model, seeds, rng.child(STREAM_PROPAGATE, k), k - 1)
    if not np.any(stuck):
        return nodes
    log.warning(
        f"step {k}: {int(stuck.sum())} node(s) could not be propagated inside the model domain; "
        "reseeding them from surviving nodes"
    )
    if diagnostics is not None:
        diagnostics.reseeded_nodes += int(stuck.sum())
    for attempt in range(1, RESEED_ROUNDS + 1):
        if np.all(stuck):
            break
        survivors = ~stuck
        donors = PointCloud(step=k - 1, nodes=seeds, values=survivors / np.count_nonzero(survivors))
        epsilon = 0.5 / np.count_nonzero(survivors)
        seeds = resample(donors, epsilon, cfg.jitter_scale, rng.child(STREAM_RESEED, k, attempt, 0), model)
        rows = np.flatnonzero(stuck)
        nodes[rows], still = propagate_rows(model, seeds[rows], rng.child(STREAM_RESEED, k, attempt, 1), k - 1)
        stuck[rows] = still
        if not np.any(stuck):
            return nodes
    node = seeds[np.flatnonzero(stuck)[0]].copy()
    raise ModelDomainError(
        f"step {k}: {int(stuck.sum())} node(s) stay outside the model domain after reseeding", node=node
    )


def filter_step(
    state: FilterState,
    model: StateSpaceModel,
    cfg: FilterConfig,
    observation: np.ndarray,
    rng: RandomSource,
    k: int,
    log: DiagnosticLog = SILENT,
) -> FilterState:
    """Advance the posterior cloud from step ``k - 1`` to step ``k``."""
    diagnostics = dataclasses.replace(state.diagnostics, resample_flags=list(state.diagnostics.resample_flags))
    epsilon = cfg.threshold
    ratio = degeneracy_ratio(state.cloud, epsilon)
    resampled = ratio >= cfg.tau
    log.debug(f"step {k}: degeneracy ratio {ratio:.4f} (tau {cfg.tau}), resampling={resampled}")
    seeds = state.cloud.nodes
    seed_density = state.node_density
    if resampled:
        if np.all(state.cloud.values < epsilon):
            diagnostics.resample_fallbacks += 1
        seeds = resample(state.cloud, epsilon, cfg.jitter_scale, rng.child(STREAM_RESAMPLE, k), model, log)
        seed_density = intermediate_density(state.cloud, state.node_density, epsilon)
        diagnostics.resample_events += 1
    diagnostics.resample_flags.append(bool(resampled))

    nodes = propagate_seeds(seeds, model, cfg, rng, k, diagnostics, log)
    masses, node_density = predict_masses(state, nodes, seed_density, model, cfg, rng, k, diagnostics, log)
    posterior = update(masses, nodes, observation, model, k)

    cloud = PointCloud(step=k, nodes=nodes, values=posterior)
    return FilterState.from_cloud(cloud, node_density, cfg.shepard, bool(resampled), diagnostics)


@dataclass
class FilterRun:
    estimates: np.ndarray
    resampled: np.ndarray
    diagnostics: FilterDiagnostics
    clouds: Dict[int, PointCloud] = field(default_factory=dict)


class MeshfreeImplicitFilter:
    """Runs the meshfree implicit filter over a whole observation sequence."""

    def __init__(
        self,
        model: StateSpaceModel,
        cfg: FilterConfig,
        log: DiagnosticLog = SILENT,
    ) -> None:
        self.model = model
        self.cfg = cfg
        self.log = log

    def initialize(self, p0: GaussianSpec, rng: RandomSource) -> FilterState:
        return initial_state(p0, self.cfg, rng, self.model)

    def step(self, state: FilterState, observation: np.ndarray, rng: RandomSource, k: int) -> FilterState:
        return filter_step(state, self.model, self.cfg, observation, rng, k, self.log)

    def run(
        self,
        observations: np.ndarray,
        p0: GaussianSpec,
        rng: RandomSource,
        keep_clouds: Iterable[int] = (),
    ) -> FilterRun:
        keep = set(keep_clouds)
        state = self.initialize(p0, rng)
        clouds: Dict[int, PointCloud] = {0: state.cloud} if keep else {}
        estimates = np.empty((len(observations), self.model.d))
        for k, observation in enumerate(observations, start=1):
            state = self.step(state, observation, rng, k)
            estimates[k - 1] = posterior_mean(state.cloud)
            if k in keep:
                clouds[k] = state.cloud
        return FilterRun(
            estimates=estimates,
            resampled=np.asarray(state.diagnostics.resample_flags, dtype=bool),
            diagnostics=state.diagnostics,
            clouds=clouds,
        )
