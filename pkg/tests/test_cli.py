import json

import pytest

from kronproj import cli


def run_cli(args):
    return cli.main(args)


class TestVerifyOracle:
    def test_passes(self, tmp_path, capsys):
        out = tmp_path / "oracle.json"
        code = run_cli(["verify-oracle", "--seed", "3", "--out", str(out),
                        "--config", str(write_cfg(tmp_path, {"reps": 25}))])
        assert code == 0
        payload = json.loads(out.read_text())
        assert payload["ok"] is True


def write_cfg(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return p


class TestRunMaint:
    def test_oracle_checked_run_passes(self, tmp_path):
        cfg = write_cfg(tmp_path, {"n": 4, "m": 5, "T": 15, "C1": 0.3})
        out = tmp_path / "maint.json"
        code = run_cli(["run-maint", "--config", str(cfg), "--seed", "1",
                        "--out", str(out)])
        assert code == 0
        payload = json.loads(out.read_text())
        assert payload["kind"] == "maintenance"
        assert len(payload["records"]) == 15

    def test_reports_byte_identical(self, tmp_path):
        cfg = write_cfg(tmp_path, {"n": 4, "m": 5, "T": 8})
        out1, out2 = tmp_path / "a.json", tmp_path / "b.json"
        run_cli(["run-maint", "--config", str(cfg), "--seed", "7", "--out", str(out1)])
        run_cli(["run-maint", "--config", str(cfg), "--seed", "7", "--out", str(out2)])
        assert out1.read_bytes() == out2.read_bytes()

    def test_csv_format(self, tmp_path):
        cfg = write_cfg(tmp_path, {"n": 4, "m": 5, "T": 5})
        out = tmp_path / "maint.csv"
        code = run_cli(["run-maint", "--config", str(cfg), "--seed", "2",
                        "--out", str(out), "--format", "csv"])
        assert code == 0
        lines = out.read_text().strip().splitlines()
        assert len(lines) == 6  # header + 5 records
        assert "m_rel_err" in lines[0]


class TestCEBench:
    def test_small_bench(self, tmp_path):
        cfg = write_cfg(
            tmp_path,
            {"b": 32, "n": 128, "trials": 400, "families": ["gaussian", "countsketch"]},
        )
        out = tmp_path / "ce.json"
        code = run_cli(["ce-bench", "--config", str(cfg), "--seed", "4",
                        "--out", str(out)])
        assert code == 0
        payload = json.loads(out.read_text())
        assert len(payload["reports"]) == 2


class TestDPBench:
    def test_small_battery(self, tmp_path):
        cfg = write_cfg(tmp_path, {"size": 400, "trials": 60})
        out = tmp_path / "dp.json"
        code = run_cli(["dp-bench", "--config", str(cfg), "--seed", "5",
                        "--out", str(out)])
        assert code == 0
        payload = json.loads(out.read_text())
        assert len(payload["results"]) == 5


class TestAdaptiveSim:
    def test_norm_battery(self, tmp_path):
        cfg = write_cfg(tmp_path, {"runs": 3, "T": 8, "n": 16, "L": 12, "q": 5})
        out = tmp_path / "ad.json"
        code = run_cli(["adaptive-sim", "--config", str(cfg), "--seed", "6",
                        "--out", str(out)])
        assert code == 0
        payload = json.loads(out.read_text())
        assert payload["ok_fraction"] == 1.0

    def test_setquery_battery(self, tmp_path):
        cfg = write_cfg(tmp_path, {"runs": 2, "T": 6, "n": 16, "k": 4,
                                   "L": 10, "q": 5})
        code = run_cli(["setquery-sim", "--config", str(cfg), "--seed", "7",
                        "--out", str(tmp_path / "sq.json")])
        assert code == 0

    def test_check_oracle_off_single_run(self, tmp_path):
        cfg = write_cfg(tmp_path, {"T": 5, "n": 8, "L": 6, "q": 3})
        out = tmp_path / "raw.json"
        code = run_cli(["adaptive-sim", "--config", str(cfg), "--seed", "8",
                        "--out", str(out), "--check-oracle", "off"])
        assert code == 0
        payload = json.loads(out.read_text())
        assert payload["kind"] == "adaptive-norm"


class TestComplexity:
    def test_f_ac_value(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path, {"a": 0.31, "c": 0.0, "omega": 2.0, "theta": 4.0})
        code = run_cli(["complexity", "--config", str(cfg)])
        assert code == 0
        payload = json.loads(capsys.readouterr().out)
        assert abs(payload["f_ac"] - 4.0) <= 1e-12


class TestErrors:
    def test_bad_config_path(self):
        assert run_cli(["run-maint", "--config", "/does/not/exist.json"]) == 1

    def test_invalid_parameter_exits_one(self, tmp_path):
        cfg = write_cfg(tmp_path, {"a": 1.0})
        assert run_cli(["complexity", "--config", str(cfg)]) == 1
