"""Damped Newton inversion of the state equation ``f(x, w) = target`` for ``x``."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import InvalidSpecError
from .statespace import FD_RELATIVE_STEP, StateSpaceModel, jacobian_x

MAX_HALVINGS = 30
SINGULAR_SHIFT = 1e-10


@dataclass(frozen=True)
class SolveConfig:
    residual_tol: float = 1e-10
    max_iters: int = 50
    damping: float = 1.0
    fd_step: float = FD_RELATIVE_STEP

    def __post_init__(self) -> None:
        if not self.residual_tol > 0:
            raise InvalidSpecError(f"residual_tol must be positive, got {self.residual_tol}")
        if self.max_iters < 1:
            raise InvalidSpecError(f"max_iters must be at least 1, got {self.max_iters}")
        if not 0.0 < self.damping <= 1.0:
            raise InvalidSpecError(f"damping must lie in (0, 1], got {self.damping}")
        if not self.fd_step > 0:
            raise InvalidSpecError(f"fd_step must be positive, got {self.fd_step}")


@dataclass(frozen=True)
class SolveResult:
    root: np.ndarray
    residual_norm: float
    iterations: int
    converged: bool


@dataclass(frozen=True)
class BatchSolveResult:
    roots: np.ndarray
    residual_norms: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray

    def __len__(self) -> int:
        return int(self.converged.size)

    def __getitem__(self, index: int) -> SolveResult:
        return SolveResult(
            root=self.roots[index].copy(),
            residual_norm=float(self.residual_norms[index]),
            iterations=int(self.iterations[index]),
            converged=bool(self.converged[index]),
        )


def _newton_directions(jacobians: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.solve(jacobians, rhs[..., np.newaxis])[..., 0]
    except np.linalg.LinAlgError:
        pass
    directions = np.empty_like(rhs)
    for row, (jacobian, b) in enumerate(zip(jacobians, rhs)):
        try:
            directions[row] = np.linalg.solve(jacobian, b)
        except np.linalg.LinAlgError:
            diagonal = np.diag(jacobian)
            shifted = jacobian + np.diag(SINGULAR_SHIFT * (1.0 + np.abs(diagonal)))
            try:
                directions[row] = np.linalg.solve(shifted, b)
            except np.linalg.LinAlgError:
                directions[row] = np.linalg.lstsq(shifted, b, rcond=None)[0]
    return directions


def _residuals(
    model: StateSpaceModel,
    x: np.ndarray,
    w: np.ndarray,
    target: np.ndarray,
    k: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Residual vectors and max-norms; rows outside the domain get ``inf``."""
    inside = np.atleast_1d(model.domain_guard(x))
    values = np.full(x.shape, np.nan)
    norms = np.full(x.shape[0], np.inf)
    if np.any(inside):
        values[inside] = model.transition(x[inside], w[inside], k) - target[inside]
        norms[inside] = np.max(np.abs(values[inside]), axis=1)
        norms[~np.isfinite(norms)] = np.inf
    return values, norms


def implicit_solve_batch(
    model: StateSpaceModel,
    targets: np.ndarray,
    noise: np.ndarray,
    k: int,
    guesses: np.ndarray,
    cfg: SolveConfig = SolveConfig(),
) -> BatchSolveResult:
    """Solve ``transition(x_i, noise_i, k) = targets_i`` independently for every row.

    Each row runs damped Newton with backtracking: the step is halved (up to
    30 times) while the residual fails to decrease or the trial point leaves
    the domain. Rows that cannot make progress stop early with
    ``converged=False``.
    """
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    noise = np.atleast_2d(np.asarray(noise, dtype=float))
    x = np.atleast_2d(np.asarray(guesses, dtype=float)).copy()

    residual, norms = _residuals(model, x, noise, targets, k)
    iterations = np.zeros(x.shape[0], dtype=int)
    converged = norms <= cfg.residual_tol
    active = ~converged & np.isfinite(norms)

    for _ in range(cfg.max_iters):
        rows = np.flatnonzero(active)
        if rows.size == 0:
            break
        jacobians = jacobian_x(model, x[rows], noise[rows], k, cfg.fd_step)
        directions = _newton_directions(jacobians, -residual[rows])

        factor = np.full(rows.size, cfg.damping)
        pending = np.arange(rows.size)
        accepted = np.zeros(rows.size, dtype=bool)
        for _halving in range(MAX_HALVINGS + 1):
            subset = rows[pending]
            trial = x[subset] + factor[pending, np.newaxis] * directions[pending]
            trial_residual, trial_norms = _residuals(model, trial, noise[subset], targets[subset], k)
            better = trial_norms < norms[subset]
            if np.any(better):
                taken = subset[better]
                x[taken] = trial[better]
                residual[taken] = trial_residual[better]
                norms[taken] = trial_norms[better]
                accepted[pending[better]] = True
            pending = pending[~better]
            if pending.size == 0:
                break
            factor[pending] *= 0.5

        iterations[rows[accepted]] += 1
        converged[rows] = norms[rows] <= cfg.residual_tol
        active[rows] = ~converged[rows] & accepted

    return BatchSolveResult(roots=x, residual_norms=norms, iterations=iterations, converged=converged)


def implicit_solve(
    model: StateSpaceModel,
    target: np.ndarray,
    w: np.ndarray,
    k: int,
    guess: np.ndarray,
    cfg: SolveConfig = SolveConfig(),
) -> SolveResult:
    result = implicit_solve_batch(
        model,
        np.asarray(target, dtype=float)[np.newaxis, :],
        np.asarray(w, dtype=float)[np.newaxis, :],
        k,
        np.asarray(guess, dtype=float)[np.newaxis, :],
        cfg,
    )
    return result[0]
