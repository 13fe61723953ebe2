"""Realization workers and the process pool that fans them out."""

from __future__ import annotations

import concurrent.futures
import dataclasses
import multiprocessing
import time
from dataclasses import dataclass
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from .baselines import ExtendedKalmanFilter, ParticleFilter
from .config import MethodSettings
from .exceptions import DivergenceError, FilterError
from .filter import MeshfreeImplicitFilter
from .logging_utils import DiagnosticLog
from .metrics import global_rmse, step_errors
from .models import ErrorSeries, RealizationOutcome, RunSummary, TrajectoryRecord
from .scenarios import Scenario, simulate_truth
from .statespace import RandomSource

TRUTH_STREAM = 0
METHOD_STREAMS = {"implicit": 1, "pf": 2, "ekf": 3}
COMPLETION_QUORUM = 0.8


@dataclass(frozen=True)
class RealizationTask:
    scenario: Scenario
    settings: MethodSettings
    realization: int
    seed: int
    keep_clouds: Tuple[int, ...] = ()
    verbose: bool = False


def realization_seed(base_seed: int, realization: int) -> int:
    return int(base_seed) + int(realization)


def run_realization(task: RealizationTask) -> RealizationOutcome:
    """Simulate the truth of one realization and run the selected filter on it.

    Any ``FilterError`` ends the realization and is reported as its failure.
    Timing covers the filter loop only.
    """
    log = DiagnosticLog(enabled=True, verbose=task.verbose)
    source = RandomSource(task.seed)
    scenario = task.scenario
    settings = task.settings
    outcome = RealizationOutcome(realization=task.realization, seed=task.seed)
    try:
        truth = simulate_truth(scenario, source.child(TRUTH_STREAM))
        model = scenario.model()
        p0 = scenario.initial_spec()
        stream = source.child(METHOD_STREAMS[settings.method])

        started = time.perf_counter()
        if settings.method == "implicit":
            estimator = MeshfreeImplicitFilter(model, settings.filter_config, log)
            run = estimator.run(truth.observations, p0, stream, keep_clouds=task.keep_clouds)
            outcome.clouds = run.clouds
            outcome.diagnostics = {
                key: value
                for key, value in dataclasses.asdict(run.diagnostics).items()
                if key != "resample_flags"
            }
        elif settings.method == "pf":
            run = ParticleFilter(model, settings.particles, log).run(truth.observations, p0, stream)
        else:
            run = ExtendedKalmanFilter(model, log).run(truth.observations, p0, stream)
        if not np.all(np.isfinite(run.estimates)):
            raise DivergenceError("non-finite state estimate")
        elapsed = time.perf_counter() - started
    except FilterError as exc:
        outcome.failure = f"{type(exc).__name__}: {exc}"
        log.error(f"realization {task.realization} (seed {task.seed}) diverged - {outcome.failure}")
        return outcome

    states = truth.states[1:]
    outcome.trajectory = TrajectoryRecord(
        realization=task.realization,
        seed=task.seed,
        method=settings.method,
        truth=states,
        observations=truth.observations,
        estimates=run.estimates,
        errors=step_errors(run.estimates, states),
        resampled=np.asarray(run.resampled, dtype=bool),
        wall_clock_seconds=elapsed,
    )
    return outcome


def default_workers() -> int:
    return multiprocessing.cpu_count() or 1


def execute(
    tasks: Sequence[RealizationTask],
    threads: Optional[int] = None,
    desc: str = "Realizations",
) -> List[RealizationOutcome]:
    """Run every task, in a process pool when more than one worker is allowed.

    Outcomes come back in task order whatever the completion order.
    """
    results: Dict[int, RealizationOutcome] = {}
    worker_count = max(1, min(threads or default_workers(), len(tasks)))
    with tqdm(total=len(tasks), desc=desc, unit="rep") as progress:
        progress.set_postfix_str("Diverged: 0")
        failures = 0
        if worker_count == 1:
            for index, task in enumerate(tasks):
                results[index] = run_realization(task)
                failures += 0 if results[index].completed else 1
                progress.update(1)
                progress.set_postfix_str(f"Diverged: {failures}")
        else:
            with concurrent.futures.ProcessPoolExecutor(max_workers=worker_count) as executor:
                future_map = {executor.submit(run_realization, task): index for index, task in enumerate(tasks)}
                for future in concurrent.futures.as_completed(future_map):
                    index = future_map[future]
                    results[index] = future.result()
                    failures += 0 if results[index].completed else 1
                    progress.update(1)
                    progress.set_postfix_str(f"Diverged: {failures}")
    return [results[index] for index in range(len(tasks))]


def summarize(
    outcomes: Sequence[RealizationOutcome],
    label: str,
    scenario: str,
    parameters: Mapping[str, Any],
    config_hash: str,
) -> RunSummary:
    completed = [outcome.trajectory for outcome in outcomes if outcome.trajectory is not None]
    err_g = None
    if completed:
        err_g = global_rmse([ErrorSeries(record.errors, record.realization, record.method) for record in completed])
    times = [record.wall_clock_seconds for record in completed]
    diagnostics: Dict[str, int] = {}
    for outcome in outcomes:
        for key, value in outcome.diagnostics.items():
            diagnostics[key] = diagnostics.get(key, 0) + int(value)
    return RunSummary(
        method=label,
        scenario=scenario,
        parameters=dict(parameters),
        config_hash=config_hash,
        seeds=[outcome.seed for outcome in outcomes],
        err_g=err_g,
        wall_clock_seconds=float(sum(times)),
        mean_wall_clock_seconds=float(np.mean(times)) if times else None,
        completed=len(completed),
        divergences=[
            {"realization": outcome.realization, "seed": outcome.seed, "reason": outcome.failure}
            for outcome in outcomes
            if not outcome.completed
        ],
        diagnostics=diagnostics,
    )


def quorum_reached(summary: RunSummary) -> bool:
    return summary.completed >= COMPLETION_QUORUM * summary.repetitions
