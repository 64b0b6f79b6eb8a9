"""Command-line interface tests: exit codes, artifacts, reproducibility."""

import filecmp

import pytest
import yaml
from click.testing import CliRunner

from iolwsim.cli import main

RUN_30 = ["run", "--kind", "connect", "--atten-db", "30", "--seed", "7", "--reps", "20"]


@pytest.fixture
def runner():
    return CliRunner()


class TestRun:
    def test_writes_artifacts(self, runner, tmp_path):
        result = runner.invoke(main, RUN_30 + ["--out", str(tmp_path)])
        assert result.exit_code == 0, result.output
        for name in ("durations.csv", "summary.txt", "ecdf.csv", "manifest.yaml"):
            assert (tmp_path / name).exists()
        header = (tmp_path / "durations.csv").read_text().splitlines()[:4]
        assert header[0].startswith("# iolwsim")
        assert any(line.startswith("# digest:") for line in header)
        assert any(line.startswith("# seed:") for line in header)

    def test_reruns_are_byte_identical(self, runner, tmp_path):
        out1, out2 = tmp_path / "a", tmp_path / "b"
        assert runner.invoke(main, RUN_30 + ["--out", str(out1)]).exit_code == 0
        assert runner.invoke(main, RUN_30 + ["--out", str(out2)]).exit_code == 0
        for name in ("durations.csv", "summary.txt", "ecdf.csv"):
            assert filecmp.cmp(out1 / name, out2 / name, shallow=False), name

    def test_attenuation_out_of_range(self, runner, tmp_path):
        result = runner.invoke(main, ["run", "--atten-db", "200", "--out", str(tmp_path)])
        assert result.exit_code == 2
        assert "outside [0, 120]" in result.output

    def test_infeasible_channel_exits_3(self, runner, tmp_path):
        config = tmp_path / "opaque.yaml"
        config.write_text(
            yaml.safe_dump({"per_curve": {"rssi_mid": 200.0, "slope": 0.6, "floor": 0.0}})
        )
        result = runner.invoke(
            main,
            ["run", "--atten-db", "30", "--reps", "2", "--config", str(config),
             "--out", str(tmp_path / "out")],
        )
        assert result.exit_code == 3
        assert "infeasible" in result.output

    def test_trace_file_format(self, runner, tmp_path):
        trace = tmp_path / "trace.txt"
        result = runner.invoke(
            main,
            RUN_30 + ["--reps", "3", "--out", str(tmp_path), "--trace", str(trace)],
        )
        assert result.exit_code == 0
        lines = trace.read_text().splitlines()
        assert lines
        for line in lines:
            timestamp, entity, phase_from, phase_to, label = line.split()
            assert int(timestamp) >= 0
            assert entity == "device"
            assert phase_from != phase_to
            assert label

    def test_output_dir_from_environment(self, runner, tmp_path, monkeypatch):
        monkeypatch.setenv("IOLWSIM_OUT", str(tmp_path / "envout"))
        result = runner.invoke(main, RUN_30)
        assert result.exit_code == 0
        assert (tmp_path / "envout" / "durations.csv").exists()


class TestSweep:
    SWEEP = [
        "sweep", "--kind", "connect", "--atten-db", "30", "--atten-db", "80",
        "--seed", "7", "--reps", "20",
    ]

    def test_writes_cells_and_table(self, runner, tmp_path):
        result = runner.invoke(main, self.SWEEP + ["--out", str(tmp_path)])
        assert result.exit_code == 0, result.output
        for atten in ("30", "80"):
            for mode in ("iolw", "iolws"):
                assert (tmp_path / f"connect_{atten}dB_{mode}" / "durations.csv").exists()
        table = (tmp_path / "table.csv").read_text().splitlines()
        header = [line for line in table if line.startswith("attenuation_db")]
        assert header == [
            "attenuation_db,iolw_min,iolws_min,iolw_max,iolws_max,"
            "iolw_mean,iolws_mean,iolw_std,iolws_std"
        ]
        rows = [line for line in table if not line.startswith(("#", "attenuation_db"))]
        assert len(rows) == 2

    def test_missing_attenuations_exit_2(self, runner, tmp_path):
        result = runner.invoke(main, ["sweep", "--out", str(tmp_path)])
        assert result.exit_code == 2

    def test_parallel_equals_serial(self, runner, tmp_path):
        serial, parallel = tmp_path / "s", tmp_path / "p"
        assert runner.invoke(main, self.SWEEP + ["--out", str(serial)]).exit_code == 0
        assert (
            runner.invoke(main, self.SWEEP + ["--jobs", "2", "--out", str(parallel)]).exit_code
            == 0
        )
        for cell in ("connect_30dB_iolw", "connect_30dB_iolws",
                     "connect_80dB_iolw", "connect_80dB_iolws"):
            assert filecmp.cmp(
                serial / cell / "durations.csv",
                parallel / cell / "durations.csv",
                shallow=False,
            ), cell


class TestReport:
    def test_missing_outputs_exit_2(self, runner, tmp_path):
        result = runner.invoke(main, ["report", "--sweep-dir", str(tmp_path)])
        assert result.exit_code == 2

    def test_comparison_lines_printed(self, runner, tmp_path):
        sweep = [
            "sweep", "--kind", "connect", "--atten-db", "30",
            "--seed", "7", "--reps", "100", "--out", str(tmp_path),
        ]
        assert runner.invoke(main, sweep).exit_code == 0
        result = runner.invoke(main, ["report", "--sweep-dir", str(tmp_path)])
        assert result.exit_code == 0, result.output
        assert "connect 30dB iolw mean:" in result.output
        assert "overall: PASS" in result.output


class TestCalibrate:
    def test_insufficient_budget_exits_4(self, runner, tmp_path):
        config = tmp_path / "iolwsim.yaml"
        result = runner.invoke(
            main,
            ["calibrate", "--budget", "1", "--reps", "10", "--config", str(config)],
        )
        assert result.exit_code == 4
        assert "calibration diverged" in result.output
        assert not config.exists()

    def test_fitted_curve_written_to_config(self, runner, tmp_path):
        # A fast fit against a 4-row reference that the default-shaped
        # curve can reach with a small budget.
        reference = tmp_path / "reference.yaml"
        rows = [
            {"attenuation_db": a, "rssi_dbm": r,
             "iolw": {"min": 0.429, "max": 0.487, "mean": m, "std": 0.02},
             "iolws": {"min": 0.454, "max": 0.512, "mean": m + 0.025, "std": 0.02}}
            for a, r, m in [(30, -37, 0.458), (50, -53, 0.458),
                            (65, -67, 0.459), (80, -83, 0.472)]
        ]
        reference.write_text(yaml.safe_dump({
            "connect": {"rows": rows},
            "handover_printed": {"rows": rows},
            "handover_targets": {
                "surplus_over_connect_ms": [50, 150], "max_s": 3.0,
                "q99": [{"rssi_dbm": -80, "max_s": 0.95}],
            },
            "connect_q99": [{"rssi_dbm": -83, "max_s": 0.81}],
        }))
        config = tmp_path / "iolwsim.yaml"
        config.write_text(yaml.safe_dump({"scenario": {}}))
        result = runner.invoke(
            main,
            ["calibrate", "--reference", str(reference), "--budget", "3",
             "--reps", "10", "--config", str(config)],
        )
        assert result.exit_code == 0, result.output
        raw = yaml.safe_load(config.read_text())
        assert set(raw["per_curve"]) == {"rssi_mid", "slope", "floor"}
        assert raw["scenario"] == {}  # rest of the file preserved
