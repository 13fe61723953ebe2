"""Whole-run checks over many seeds; deselect with ``-m "not slow"``."""

import numpy as np
import pytest

from meshfree_filter.config import MethodSettings
from meshfree_filter.filter import (
    STREAM_RESAMPLE,
    FilterConfig,
    MeshfreeImplicitFilter,
    cloud_std,
    degeneracy_ratio,
    filter_step,
    initial_state,
    posterior_mean,
    resample,
)
from meshfree_filter.metrics import global_rmse
from meshfree_filter.models import ErrorSeries
from meshfree_filter.runner import RealizationTask, execute, realization_seed
from meshfree_filter.scenarios import BearingScenario, LinearGaussianScenario, TumorScenario, simulate_truth
from meshfree_filter.statespace import RandomSource

pytestmark = pytest.mark.slow

BENCH_REPS = 10
BENCH_SEED = 2000


@pytest.mark.parametrize("dim", [1, 2])
def test_implicit_filter_tracks_kalman(kalman, dim):
    scenario = LinearGaussianScenario(dim=dim)
    model = scenario.model()
    p0 = scenario.initial_spec()
    cfg = FilterConfig(points=2000, samples=20)
    deviations = []
    steady_std = None
    for seed in range(10):
        truth = simulate_truth(scenario, RandomSource(seed, (0,)))
        means, covs = kalman(model, p0, truth.observations)
        steady_std = np.sqrt(np.trace(covs[-1]) / dim)
        run = MeshfreeImplicitFilter(model, cfg).run(truth.observations, p0, RandomSource(seed, (1,)))
        deviations.append(np.sqrt(np.mean(np.sum((run.estimates - means) ** 2, axis=1) / dim)))
    assert np.mean(deviations) <= 0.1 * steady_std


def test_tumor_cloud_concentrates_on_truth():
    scenario = TumorScenario()
    model = scenario.model()
    cfg = FilterConfig(points=1500, samples=10)
    inside = []
    for seed in range(10):
        truth = simulate_truth(scenario, RandomSource(seed, (0,)))
        source = RandomSource(seed, (1,))
        state = initial_state(scenario.initial_spec(), cfg, source, model)
        for k, observation in enumerate(truth.observations, start=1):
            state = filter_step(state, model, cfg, observation, source, k)
            gap = np.abs(truth.states[k] - posterior_mean(state.cloud))
            inside.append(bool(np.all(gap <= 3 * cloud_std(state.cloud))))
    assert np.mean(inside) >= 0.95


@pytest.mark.parametrize("scenario", [TumorScenario(), BearingScenario()], ids=["tumor", "bearing"])
def test_resampling_invariants_over_full_run(scenario):
    model = scenario.model()
    cfg = FilterConfig(points=scenario.points, samples=scenario.samples)
    truth = simulate_truth(scenario, RandomSource(31, (0,)))
    source = RandomSource(31, (1,))
    state = initial_state(scenario.initial_spec(), cfg, source, model)
    for k, observation in enumerate(truth.observations, start=1):
        keep = state.cloud.values >= cfg.threshold
        triggered = degeneracy_ratio(state.cloud, cfg.threshold) >= cfg.tau
        if triggered:
            seeds = resample(state.cloud, cfg.threshold, cfg.jitter_scale, source.child(STREAM_RESAMPLE, k), model)
            np.testing.assert_array_equal(seeds[keep], state.cloud.nodes[keep])
        state = filter_step(state, model, cfg, observation, source, k)
        assert state.resampled is bool(triggered)
        assert abs(state.cloud.values.sum() - 1.0) <= 1e-10
        assert np.all(state.cloud.values >= 0)
    assert state.diagnostics.resample_events == sum(state.diagnostics.resample_flags)


@pytest.fixture(scope="module")
def bearing_bench():
    scenario = BearingScenario()
    methods = {
        "implicit": MethodSettings(
            "implicit", "implicit", filter_config=FilterConfig(points=scenario.points, samples=scenario.samples)
        ),
        "pf": MethodSettings("pf", "pf", particles=scenario.particles),
        "ekf": MethodSettings("ekf", "ekf"),
    }
    return {
        name: execute(
            [
                RealizationTask(scenario, settings, j, realization_seed(BENCH_SEED, j))
                for j in range(BENCH_REPS)
            ],
            desc=name,
        )
        for name, settings in methods.items()
    }


def _rmse(outcome):
    return np.sqrt(np.mean(outcome.trajectory.errors**2)) if outcome.completed else np.inf


def _err_g(outcomes):
    return global_rmse(
        [ErrorSeries(o.trajectory.errors, o.realization, o.trajectory.method) for o in outcomes if o.completed]
    )


def test_ekf_worse_than_implicit_on_bearing(bearing_bench):
    pairs = list(zip(bearing_bench["implicit"], bearing_bench["ekf"]))
    assert all(implicit.completed for implicit, _ in pairs)
    worse = sum(_rmse(ekf) > _rmse(implicit) for implicit, ekf in pairs)
    assert worse >= 0.9 * len(pairs)


@pytest.mark.xfail(strict=False, reason="a 15000-particle bootstrap filter is close to optimal on this benchmark")
def test_implicit_beats_large_particle_filter(bearing_bench):
    assert _err_g(bearing_bench["implicit"]) <= 0.8 * _err_g(bearing_bench["pf"])


@pytest.mark.xfail(strict=False, reason="wall-clock ratios depend on the machine and its load")
def test_cost_comparable_to_large_particle_filter(bearing_bench):
    def seconds(outcomes):
        return sum(o.trajectory.wall_clock_seconds for o in outcomes if o.completed)

    ratio = seconds(bearing_bench["implicit"]) / seconds(bearing_bench["pf"])
    assert 0.3 <= ratio <= 3.0
