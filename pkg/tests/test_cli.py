import csv
import json

import numpy as np
import pytest

from meshfree_filter import runner
from meshfree_filter.cli import main
from meshfree_filter.models import RealizationOutcome
from meshfree_filter.scenarios import LinearGaussianScenario, simulate_truth
from meshfree_filter.statespace import RandomSource


def _run(tmp_path, name, *extra):
    out = tmp_path / name
    argv = ["run", "--scenario", "linear_gaussian", "--reps", "1", "--seed", "7", "--threads", "1", "--out", str(out)]
    return main(argv + list(extra)), out


def _summary(out):
    return json.loads((out / "summary.json").read_text(encoding="utf-8"))


def _rows(path):
    with path.open(encoding="utf-8", newline="") as handle:
        return list(csv.reader(handle))


class TestRun:
    def test_ekf_matches_kalman_oracle(self, tmp_path, kalman):
        code, out = _run(tmp_path, "ekf", "--method", "ekf")
        assert code == 0
        scenario = LinearGaussianScenario()
        truth = simulate_truth(scenario, RandomSource(7).child(0))
        means, _ = kalman(scenario.model(), scenario.initial_spec(), truth.observations)
        expected = float(np.sqrt(np.mean(np.sum((means - truth.states[1:]) ** 2, axis=1))))
        summary = _summary(out)
        assert summary["err_g"] == pytest.approx(expected, abs=1e-8)
        assert summary["completed"] == 1
        assert summary["divergence_count"] == 0
        assert summary["seeds"] == [7]

    def test_trajectory_csv_layout(self, tmp_path):
        code, out = _run(tmp_path, "ekf", "--method", "ekf")
        assert code == 0
        rows = _rows(out / "linear_gaussian_ekf_rep000.csv")
        assert rows[0] == ["step", "truth_1", "estimate_1", "err_k", "resampled"]
        assert len(rows) == 41
        assert [row[0] for row in rows[1:]] == [str(k) for k in range(1, 41)]
        assert {row[-1] for row in rows[1:]} == {"0"}

    @pytest.mark.parametrize(
        "method", [("--method", "ekf"), ("--method", "implicit", "--points", "200", "--samples", "2")]
    )
    def test_reruns_are_byte_identical(self, tmp_path, method):
        first = _run(tmp_path, "first", *method)
        second = _run(tmp_path, "second", *method)
        assert first[0] == second[0] == 0
        name = f"linear_gaussian_{method[1]}_rep000.csv"
        assert (first[1] / name).read_bytes() == (second[1] / name).read_bytes()

    def test_worker_count_does_not_change_results(self, tmp_path):
        common = ["run", "--scenario", "tumor", "--method", "pf", "--particles", "300", "--reps", "3", "--seed", "4"]
        assert main(common + ["--threads", "1", "--out", str(tmp_path / "one")]) == 0
        assert main(common + ["--threads", "2", "--out", str(tmp_path / "two")]) == 0
        for j in range(3):
            name = f"tumor_pf_rep{j:03d}.csv"
            assert (tmp_path / "one" / name).read_bytes() == (tmp_path / "two" / name).read_bytes()
        assert _summary(tmp_path / "one")["err_g"] == _summary(tmp_path / "two")["err_g"]

    def test_dump_clouds(self, tmp_path):
        code, out = _run(
            tmp_path, "clouds", "--method", "implicit", "--points", "150", "--samples", "2", "--dump-clouds", "0,3"
        )
        assert code == 0
        rows = _rows(out / "linear_gaussian_implicit_rep000_clouds.csv")
        assert rows[0] == ["step", "value", "x_1"]
        assert len(rows) == 1 + 2 * 150
        assert {row[0] for row in rows[1:]} == {"0", "3"}

    def test_dump_clouds_needs_implicit(self, tmp_path):
        code, _ = _run(tmp_path, "bad", "--method", "pf", "--dump-clouds", "1")
        assert code == 2

    def test_invalid_tau(self, tmp_path):
        code, _ = _run(tmp_path, "bad", "--tau", "1.5")
        assert code == 2

    def test_unknown_config_key(self, tmp_path):
        config = tmp_path / "config.json"
        config.write_text(json.dumps({"scenario": "tumor", "resample_every": 3}), encoding="utf-8")
        assert main(["run", "--config", str(config)]) == 2

    def test_too_many_divergences(self, tmp_path, monkeypatch):
        def diverge(task):
            return RealizationOutcome(task.realization, task.seed, failure="DivergenceError: ensemble divergence")

        monkeypatch.setattr(runner, "run_realization", diverge)
        code, out = _run(tmp_path, "diverged", "--method", "pf")
        assert code == 1
        summary = _summary(out)
        assert summary["err_g"] is None
        assert summary["divergence_count"] == 1


class TestBench:
    def test_cell_matches_single_run(self, tmp_path):
        config = tmp_path / "bench.json"
        config.write_text(
            json.dumps(
                {
                    "scenario": "linear_gaussian",
                    "reps": 2,
                    "seed": 7,
                    "threads": 1,
                    "out": str(tmp_path / "bench"),
                    "cells": [{"method": "ekf"}, {"method": "pf", "particles": 200}],
                }
            ),
            encoding="utf-8",
        )
        assert main(["bench", "--config", str(config)]) == 0
        code, out = _run(tmp_path, "single", "--method", "ekf", "--reps", "2")
        assert code == 0
        cell = json.loads((tmp_path / "bench" / "ekf" / "summary.json").read_text(encoding="utf-8"))
        assert cell["err_g"] == _summary(out)["err_g"]
        table = _rows(tmp_path / "bench" / "bench_summary.csv")
        assert [row[0] for row in table[1:]] == ["ekf", "pf_P200"]
        assert (tmp_path / "bench" / "pf_P200" / "linear_gaussian_pf_rep001.csv").is_file()

    def test_duplicate_labels(self, tmp_path):
        config = tmp_path / "bench.json"
        config.write_text(
            json.dumps({"scenario": "tumor", "cells": [{"method": "ekf"}, {"method": "ekf"}], "out": str(tmp_path)}),
            encoding="utf-8",
        )
        assert main(["bench", "--config", str(config)]) == 2

    def test_needs_config(self):
        assert main(["bench", "--scenario", "tumor"]) == 2


class TestEmitPlotdata:
    @pytest.fixture
    def trajectories(self, tmp_path):
        assert _run(tmp_path, "ekf", "--method", "ekf")[0] == 0
        assert _run(tmp_path, "pf", "--method", "pf", "--particles", "500")[0] == 0
        return tmp_path / "ekf" / "linear_gaussian_ekf_rep000.csv", tmp_path / "pf" / "linear_gaussian_pf_rep000.csv"

    def test_long_format(self, tmp_path, trajectories):
        ekf, pf = trajectories
        out = tmp_path / "plots"
        assert main(["emit-plotdata", str(ekf), f"particles={pf}", "--out", str(out)]) == 0
        long_rows = _rows(out / "plotdata_long.csv")
        assert long_rows[0] == ["step", "dimension", "series", "value"]
        assert len(long_rows) == 1 + 3 * 40
        truth = [row[3] for row in long_rows[1:] if row[2] == "truth"]
        assert truth == [row[1] for row in _rows(ekf)[1:]]
        assert {row[2] for row in long_rows[1:]} == {"truth", "ekf", "particles"}
        error_rows = _rows(out / "plotdata_errors.csv")
        assert len(error_rows) == 1 + 2 * 40
        assert [row[2] for row in error_rows[1:41]] == [row[3] for row in _rows(ekf)[1:]]

    def test_different_truths(self, tmp_path, trajectories):
        ekf, _ = trajectories
        other = tmp_path / "other"
        argv = ["run", "--scenario", "linear_gaussian", "--method", "ekf", "--seed", "8", "--threads", "1"]
        assert main(argv + ["--out", str(other)]) == 0
        second = other / "linear_gaussian_ekf_rep000.csv"
        assert main(["emit-plotdata", f"a={ekf}", f"b={second}", "--out", str(tmp_path / "p")]) == 2

    def test_missing_file(self, tmp_path):
        assert main(["emit-plotdata", str(tmp_path / "linear_gaussian_pf_rep000.csv"), "--out", str(tmp_path)]) == 2

    def test_reserved_label(self, tmp_path, trajectories):
        ekf, _ = trajectories
        assert main(["emit-plotdata", f"truth={ekf}", "--out", str(tmp_path / "p")]) == 2


def test_schema(capsys):
    assert main(["schema", "run"]) == 0
    assert "properties" in json.loads(capsys.readouterr().out)
