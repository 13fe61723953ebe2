from __future__ import annotations

import argparse
import dataclasses
import math
import sys
import time
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from tqdm import tqdm

from .config import CONFIG_KINDS, BenchConfig, MethodParams, MethodSettings, RunConfig, load_config, schema_json
from .exceptions import ConfigError, FilterError, PlotDataError
from .models import RealizationOutcome, RunSummary
from .plotdata import emit_plotdata
from .reporting import (
    config_hash,
    trajectory_filename,
    write_bench_table,
    write_cloud_csv,
    write_summary_json,
    write_trajectory_csv,
)
from .runner import RealizationTask, execute, quorum_reached, realization_seed, summarize
from .scenarios import Scenario

RUN_OVERRIDES = (
    "scenario",
    "method",
    "points",
    "samples",
    "particles",
    "neighbors",
    "epsilon",
    "tau",
    "reps",
    "seed",
    "out",
    "weight_mode",
    "discretization",
    "threads",
    "dump_clouds",
    "verbose",
)
BENCH_OVERRIDES = ("scenario", "reps", "seed", "out", "discretization", "threads", "verbose")


def _step_list(raw: str) -> List[int]:
    try:
        steps = sorted({int(part) for part in raw.split(",") if part.strip()})
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated step numbers, got {raw!r}") from exc
    if any(step < 0 for step in steps):
        raise argparse.ArgumentTypeError("step numbers must be non-negative")
    return steps


def _add_experiment_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None, help="JSON configuration file.")
    parser.add_argument(
        "--scenario",
        choices=("tumor", "bearing", "linear_gaussian"),
        default=None,
        help="Benchmark scenario.",
    )
    parser.add_argument("--reps", type=int, default=None, help="Number of realizations J.")
    parser.add_argument("--seed", type=int, default=None, help="Base seed; realization j uses seed + j.")
    parser.add_argument("--out", default=None, help="Output directory.")
    parser.add_argument(
        "--discretization",
        choices=("euler", "paper_literal"),
        default=None,
        help="Tumor model discretization.",
    )
    parser.add_argument(
        "--threads",
        type=int,
        default=None,
        help="Number of worker processes (auto-detected by default).",
    )
    parser.add_argument("--verbose", action="store_true", default=None, help="Print debug diagnostics.")


def parse_args(argv: List[str]) -> argparse.Namespace:
    parser = argparse.ArgumentParser(
        prog="meshfree_filter",
        description="Meshfree implicit filter with particle-filter and EKF baselines on benchmark scenarios.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser(
        "run",
        help="Run one method over J realizations.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    _add_experiment_flags(run)
    run.add_argument("--method", choices=("implicit", "pf", "ekf"), default=None, help="Filter to run.")
    run.add_argument("--points", type=int, default=None, help="Implicit filter node count N.")
    run.add_argument("--samples", type=int, default=None, help="Noise samples per node M.")
    run.add_argument("--particles", type=int, default=None, help="Particle count P.")
    run.add_argument("--neighbors", type=int, default=None, help="Shepard neighbour count L.")
    run.add_argument("--epsilon", type=float, default=None, help="Degeneracy threshold (default 0.01/N).")
    run.add_argument("--tau", type=float, default=None, help="Resampling trigger ratio.")
    run.add_argument(
        "--weight-mode",
        choices=("inverse_distance", "paper_literal"),
        default=None,
        help="Shepard weight formula.",
    )
    run.add_argument(
        "--dump-clouds",
        type=_step_list,
        default=None,
        help="Comma-separated steps whose implicit-filter point clouds are written as CSV.",
    )

    bench = commands.add_parser(
        "bench",
        help="Run a matrix of method cells over shared realizations.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    _add_experiment_flags(bench)

    plot = commands.add_parser(
        "emit-plotdata",
        help="Turn trajectory CSVs into plot-ready long-format CSVs.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    plot.add_argument("inputs", nargs="+", help="Trajectory CSVs, optionally as LABEL=PATH.")
    plot.add_argument("--out", type=Path, default=Path("plotdata"), help="Output directory.")

    schema = commands.add_parser("schema", help="Print the JSON schema of a configuration file.")
    schema.add_argument("kind", choices=sorted(CONFIG_KINDS))

    args = parser.parse_args(argv)
    if args.command == "bench" and args.config is None:
        parser.error("bench needs --config with the list of method cells.")
    return args


def _overrides(args: argparse.Namespace, keys: Sequence[str]) -> Dict[str, Any]:
    return {key: getattr(args, key, None) for key in keys}


def _prepare_scenario(config: Any) -> Scenario:
    scenario = config.build_scenario()
    try:
        scenario.model()
        scenario.initial_spec()
    except FilterError as exc:
        raise ConfigError(f"invalid {config.scenario} scenario: {exc}") from exc
    return scenario


def _parameters(config: Any, scenario: Scenario, method: MethodParams) -> Dict[str, Any]:
    return {
        "scenario": config.scenario,
        "scenario_params": dataclasses.asdict(scenario),
        "method": method.method_echo(scenario),
        "reps": config.reps,
        "seed": config.seed,
    }


def _tasks(
    scenario: Scenario,
    settings: MethodSettings,
    reps: int,
    base_seed: int,
    keep_clouds: Tuple[int, ...] = (),
    verbose: bool = False,
) -> List[RealizationTask]:
    return [
        RealizationTask(
            scenario=scenario,
            settings=settings,
            realization=j,
            seed=realization_seed(base_seed, j),
            keep_clouds=keep_clouds,
            verbose=verbose,
        )
        for j in range(reps)
    ]


def _write_outcomes(
    out_dir: Path,
    scenario: str,
    outcomes: Sequence[RealizationOutcome],
) -> List[Path]:
    written = []
    for outcome in outcomes:
        if outcome.trajectory is None:
            continue
        name = trajectory_filename(scenario, outcome.trajectory.method, outcome.realization)
        written.append(write_trajectory_csv(out_dir / name, outcome.trajectory))
        if outcome.clouds:
            written.append(write_cloud_csv(out_dir / name.replace(".csv", "_clouds.csv"), outcome.clouds))
    return written


def _summarize(summaries: Sequence[RunSummary], outputs: Sequence[Path], total_time_seconds: float) -> None:
    tqdm.write("")
    tqdm.write("=== SUMMARY ===")
    for summary in summaries:
        err_g = "n/a" if summary.err_g is None else f"{summary.err_g:.6g}"
        tqdm.write(f"{summary.method} on {summary.scenario}")
        tqdm.write(f"  Realizations: {summary.repetitions}")
        tqdm.write(f"  Completed: {summary.completed}")
        tqdm.write(f"  Diverged: {summary.divergence_count}")
        for divergence in summary.divergences:
            tqdm.write(f"    - rep {divergence['realization']} (seed {divergence['seed']}): {divergence['reason']}")
        tqdm.write(f"  err_G: {err_g}")
        if summary.mean_wall_clock_seconds is not None:
            tqdm.write(f"  Mean filter time: {summary.mean_wall_clock_seconds:.3f} s")
    tqdm.write(f"Output files: {len(outputs)}")
    for path in outputs:
        tqdm.write(f"  - {path}")
    tqdm.write(f"Total time: {_format_duration(total_time_seconds)}")


def _format_duration(seconds: float) -> str:
    if seconds <= 0 or math.isinf(seconds) or math.isnan(seconds):
        return "--:--"
    total_seconds = int(round(seconds))
    minutes, sec = divmod(total_seconds, 60)
    hours, minutes = divmod(minutes, 60)
    if hours:
        return f"{hours:d}:{minutes:02d}:{sec:02d}"
    return f"{minutes:d}:{sec:02d}"


def command_run(args: argparse.Namespace) -> int:
    overall_start = time.perf_counter()
    config = load_config(RunConfig, args.config, _overrides(args, RUN_OVERRIDES))
    scenario = _prepare_scenario(config)
    settings = config.settings(scenario, label=config.method)
    if config.dump_clouds and config.method != "implicit":
        raise ConfigError("dump_clouds is only available with method 'implicit'")

    parameters = _parameters(config, scenario, config)
    out_dir = Path(config.out).expanduser()
    out_dir.mkdir(parents=True, exist_ok=True)
    tqdm.write(
        f"Running {config.method} on {config.scenario} ({config.reps} realization(s), base seed {config.seed})..."
    )

    tasks = _tasks(scenario, settings, config.reps, config.seed, tuple(config.dump_clouds), config.verbose)
    outcomes = execute(tasks, config.threads, desc=f"{config.method} realizations")
    outputs = _write_outcomes(out_dir, config.scenario, outcomes)

    summary = summarize(outcomes, config.method, config.scenario, parameters, config_hash(parameters))
    outputs.append(write_summary_json(out_dir / "summary.json", summary))
    _summarize([summary], outputs, time.perf_counter() - overall_start)
    return 0 if quorum_reached(summary) else 1


def command_bench(args: argparse.Namespace) -> int:
    overall_start = time.perf_counter()
    config = load_config(BenchConfig, args.config, _overrides(args, BENCH_OVERRIDES))
    scenario = _prepare_scenario(config)
    cells = [(cell, cell.settings(scenario, label=cell.label)) for cell in config.cells]
    labels = [settings.label for _, settings in cells]
    duplicates = sorted({label for label in labels if labels.count(label) > 1})
    if duplicates:
        raise ConfigError(f"bench cells need distinct labels; repeated: {', '.join(duplicates)}")

    out_dir = Path(config.out).expanduser()
    out_dir.mkdir(parents=True, exist_ok=True)
    tqdm.write(f"Benchmarking {len(cells)} cell(s) on {config.scenario} ({config.reps} paired realization(s))...")

    tasks: List[RealizationTask] = []
    for _, settings in cells:
        tasks.extend(_tasks(scenario, settings, config.reps, config.seed, verbose=config.verbose))
    outcomes = execute(tasks, config.threads, desc="Bench realizations")

    summaries = []
    outputs: List[Path] = []
    for index, (cell, settings) in enumerate(cells):
        cell_outcomes = outcomes[index * config.reps : (index + 1) * config.reps]
        parameters = _parameters(config, scenario, cell)
        summary = summarize(cell_outcomes, settings.label, config.scenario, parameters, config_hash(parameters))
        cell_dir = out_dir / settings.label
        outputs.extend(_write_outcomes(cell_dir, config.scenario, cell_outcomes))
        outputs.append(write_summary_json(cell_dir / "summary.json", summary))
        summaries.append(summary)

    echo = config.model_dump(mode="json")
    outputs.extend(write_bench_table(out_dir, summaries, {"config": echo, "config_hash": config_hash(echo)}))
    _summarize(summaries, outputs, time.perf_counter() - overall_start)
    return 0 if all(quorum_reached(summary) for summary in summaries) else 1


def command_emit_plotdata(args: argparse.Namespace) -> int:
    outputs = emit_plotdata(args.inputs, Path(args.out).expanduser())
    for path in outputs:
        tqdm.write(f"Wrote {path}")
    return 0


def command_schema(args: argparse.Namespace) -> int:
    tqdm.write(schema_json(args.kind))
    return 0


COMMANDS = {
    "run": command_run,
    "bench": command_bench,
    "emit-plotdata": command_emit_plotdata,
    "schema": command_schema,
}


def main(argv: Optional[List[str]] = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) if not isinstance(exc.code, str) else 2

    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        tqdm.write(f"ERROR: Invalid configuration - {exc}")
        return 2
    except PlotDataError as exc:
        tqdm.write(f"ERROR: Cannot build plot data - {exc}")
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
