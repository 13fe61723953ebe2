"""Plot-ready CSVs from trajectory files of earlier runs."""

from __future__ import annotations

import csv
import re
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

from .exceptions import PlotDataError
from .reporting import read_trajectory_csv

TRAJECTORY_NAME = re.compile(r"^(?P<scenario>.+)_(?P<method>implicit|pf|ekf)_rep(?P<rep>\d{3,})$")


def parse_input(spec: str) -> Tuple[str, Path]:
    """``label=path`` or a bare path whose file name carries the method."""
    if "=" in spec:
        label, _, raw = spec.partition("=")
        if not label or not raw:
            raise PlotDataError(f"malformed input {spec!r}; expected LABEL=PATH")
        return label, Path(raw)
    path = Path(spec)
    match = TRAJECTORY_NAME.match(path.stem)
    if match is None:
        raise PlotDataError(
            f"cannot infer the method from {path.name}; name the series explicitly as LABEL={path}"
        )
    return match.group("method"), path


def emit_plotdata(inputs: Sequence[str], out_dir: Path) -> List[Path]:
    """Write ``plotdata_long.csv`` (step, dimension, series, value) and ``plotdata_errors.csv``.

    Every input must share the truth trajectory of the first one; truth values
    are copied through unchanged.
    """
    if not inputs:
        raise PlotDataError("no trajectory files given")
    series: Dict[str, dict] = {}
    for spec in inputs:
        label, path = parse_input(spec)
        if label == "truth":
            raise PlotDataError("'truth' is reserved for the truth series")
        if label in series:
            raise PlotDataError(f"series {label!r} given more than once")
        if not path.is_file():
            raise PlotDataError(f"trajectory file {path} does not exist")
        series[label] = read_trajectory_csv(path)

    reference_label, reference = next(iter(series.items()))
    for label, data in series.items():
        if data["steps"] != reference["steps"] or data["dim"] != reference["dim"]:
            raise PlotDataError(f"series {label!r} covers different steps or dimensions than {reference_label!r}")
        if data["truth"] != reference["truth"]:
            raise PlotDataError(f"series {label!r} was run on a different truth trajectory than {reference_label!r}")

    out_dir.mkdir(parents=True, exist_ok=True)
    long_path = out_dir / "plotdata_long.csv"
    with long_path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["step", "dimension", "series", "value"])
        columns = [("truth", reference["truth"])] + [(label, data["estimates"]) for label, data in series.items()]
        for name, rows in columns:
            for step, values in zip(reference["steps"], rows):
                for dimension, value in enumerate(values, start=1):
                    writer.writerow([step, dimension, name, value])

    errors_path = out_dir / "plotdata_errors.csv"
    with errors_path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["step", "series", "err_k"])
        for label, data in series.items():
            for step, value in zip(data["steps"], data["errors"]):
                writer.writerow([step, label, value])
    return [long_path, errors_path]
