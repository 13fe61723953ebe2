from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path
from typing import Any, Dict, List, Mapping, Sequence

from .exceptions import PlotDataError
from .filter import PointCloud
from .models import RunSummary, TrajectoryRecord

SUMMARY_VERSION = 1


def format_float(value: float) -> str:
    return f"{float(value):.17g}"


def config_hash(payload: Mapping[str, Any]) -> str:
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    digest = hashlib.sha256(canonical.encode("utf-8")).hexdigest()
    return digest[:16]


def trajectory_filename(scenario: str, method: str, realization: int) -> str:
    return f"{scenario}_{method}_rep{realization:03d}.csv"


def trajectory_header(dim: int) -> List[str]:
    return (
        ["step"]
        + [f"truth_{i}" for i in range(1, dim + 1)]
        + [f"estimate_{i}" for i in range(1, dim + 1)]
        + ["err_k", "resampled"]
    )


def write_trajectory_csv(path: Path, record: TrajectoryRecord) -> Path:
    """One row per step ``1..K``; floats with 17 significant digits."""
    path.parent.mkdir(parents=True, exist_ok=True)
    dim = record.truth.shape[1]
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(trajectory_header(dim))
        for k in range(record.truth.shape[0]):
            writer.writerow(
                [k + 1]
                + [format_float(v) for v in record.truth[k]]
                + [format_float(v) for v in record.estimates[k]]
                + [format_float(record.errors[k]), int(bool(record.resampled[k]))]
            )
    return path


def read_trajectory_csv(path: Path) -> Dict[str, Any]:
    """Raw string columns of a trajectory CSV: ``steps``, ``truth``, ``estimates``, ``errors``, ``resampled``."""
    try:
        with path.open("r", encoding="utf-8", newline="") as handle:
            rows = list(csv.reader(handle))
    except OSError as exc:
        raise PlotDataError(f"cannot read trajectory {path}: {exc}") from exc
    if not rows:
        raise PlotDataError(f"trajectory {path} is empty")
    header, body = rows[0], rows[1:]
    dim = (len(header) - 3) // 2
    if dim < 1 or header != trajectory_header(dim):
        raise PlotDataError(f"trajectory {path} does not have the expected header")
    if not body:
        raise PlotDataError(f"trajectory {path} has no data rows")
    if any(len(row) != len(header) for row in body):
        raise PlotDataError(f"trajectory {path} has ragged rows")
    return {
        "dim": dim,
        "steps": [row[0] for row in body],
        "truth": [row[1 : 1 + dim] for row in body],
        "estimates": [row[1 + dim : 1 + 2 * dim] for row in body],
        "errors": [row[1 + 2 * dim] for row in body],
        "resampled": [row[2 + 2 * dim] for row in body],
    }


def summary_payload(summary: RunSummary) -> Dict[str, Any]:
    return {
        "version": SUMMARY_VERSION,
        "method": summary.method,
        "scenario": summary.scenario,
        "parameters": summary.parameters,
        "config_hash": summary.config_hash,
        "repetitions": summary.repetitions,
        "seeds": list(summary.seeds),
        "err_g": summary.err_g,
        "wall_clock_seconds": summary.wall_clock_seconds,
        "mean_wall_clock_seconds": summary.mean_wall_clock_seconds,
        "completed": summary.completed,
        "divergence_count": summary.divergence_count,
        "divergences": summary.divergences,
        "diagnostics": summary.diagnostics,
    }


def write_json(path: Path, payload: Any) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def write_summary_json(path: Path, summary: RunSummary) -> Path:
    return write_json(path, summary_payload(summary))


BENCH_COLUMNS = (
    "label",
    "method",
    "points",
    "samples",
    "particles",
    "repetitions",
    "completed",
    "divergence_count",
    "err_g",
    "mean_wall_clock_seconds",
)


def bench_row(summary: RunSummary) -> Dict[str, Any]:
    params = summary.parameters
    return {
        "label": summary.method,
        "method": params.get("method"),
        "points": params.get("points") if params.get("method") == "implicit" else None,
        "samples": params.get("samples") if params.get("method") == "implicit" else None,
        "particles": params.get("particles") if params.get("method") == "pf" else None,
        "repetitions": summary.repetitions,
        "completed": summary.completed,
        "divergence_count": summary.divergence_count,
        "err_g": summary.err_g,
        "mean_wall_clock_seconds": summary.mean_wall_clock_seconds,
    }


def write_bench_table(out_dir: Path, summaries: Sequence[RunSummary], extra: Mapping[str, Any]) -> List[Path]:
    """Comparison table, one row per cell, as ``bench_summary.csv`` and ``bench_summary.json``."""
    rows = [bench_row(summary) for summary in summaries]
    csv_path = out_dir / "bench_summary.csv"
    out_dir.mkdir(parents=True, exist_ok=True)
    with csv_path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(BENCH_COLUMNS)
        for row in rows:
            writer.writerow(["" if row[key] is None else _cell(row[key]) for key in BENCH_COLUMNS])
    payload = dict(extra)
    payload["cells"] = [summary_payload(summary) for summary in summaries]
    payload["table"] = rows
    json_path = write_json(out_dir / "bench_summary.json", payload)
    return [csv_path, json_path]


def _cell(value: Any) -> str:
    if isinstance(value, float):
        return format_float(value)
    return str(value)


def write_cloud_csv(path: Path, clouds: Mapping[int, PointCloud]) -> Path:
    """Node sets of the requested steps as ``step,value,x_1..x_d`` rows."""
    path.parent.mkdir(parents=True, exist_ok=True)
    steps = sorted(clouds)
    dim = clouds[steps[0]].dim if steps else 0
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["step", "value"] + [f"x_{i}" for i in range(1, dim + 1)])
        for step in steps:
            cloud = clouds[step]
            for value, node in zip(cloud.values, cloud.nodes):
                writer.writerow([step, format_float(value)] + [format_float(v) for v in node])
    return path

