import json
import math
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from collapse_sim.cli import main
from collapse_sim.config import ConfigError, RunConfig

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

BORN = {
    "levels": [{"energy": 0.0, "re": math.sqrt(0.3), "im": 0.0},
               {"energy": 1.0, "re": 0.0, "im": math.sqrt(0.7)}],
    "sigma": 1.0,
    "time_unit": "tau_r",
    "t_max": 4,
    "dt": 0.02,
    "seed": 7,
    "n_paths": 300,
    "checkpoints": [1, 2, 4],
    "mid_time": 1,
}


def write_config(tmp_path, data=None, name="cfg.json", **changes):
    d = dict(BORN if data is None else data)
    d.update(changes)
    p = tmp_path / name
    p.write_text(json.dumps(d))
    return str(p)


def read_csv(path):
    lines = Path(path).read_text().splitlines()
    return lines[0], lines[1].split(","), np.array([[float(x) for x in ln.split(",")] for ln in lines[2:]])


class TestSimulate:
    def test_csv_layout(self, tmp_path):
        out = tmp_path / "t.csv"
        assert main(["simulate", write_config(tmp_path), "-o", str(out)]) == 0
        version, header, rows = read_csv(out)
        assert version == "# collapse-sim v1"
        assert header == ["t", "xi", "W", "H", "V", "skew", "Pi_1", "Pi_2"]
        assert rows.shape == (201, 8)
        assert rows[0, 1] == 0.0 and rows[0, 2] == 0.0
        np.testing.assert_allclose(rows[:, 6] + rows[:, 7], 1.0, atol=1e-12)

    def test_reruns_are_byte_identical(self, tmp_path):
        cfg = write_config(tmp_path)
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        main(["simulate", cfg, "-o", str(a)])
        main(["simulate", cfg, "-o", str(b)])
        assert a.read_bytes() == b.read_bytes()
        c = tmp_path / "c.csv"
        main(["simulate", cfg, "-o", str(c), "--seed", "8"])
        assert a.read_bytes() != c.read_bytes()

    def test_amplitude_columns(self, tmp_path):
        out = tmp_path / "t.csv"
        main(["simulate", write_config(tmp_path), "-o", str(out), "--with-amplitudes"])
        _, header, rows = read_csv(out)
        assert header[-4:] == ["re_1", "im_1", "re_2", "im_2"]
        np.testing.assert_allclose(rows[:, 8] ** 2 + rows[:, 9] ** 2, rows[:, 6], atol=1e-12)

    def test_eigenstate(self, tmp_path):
        out = tmp_path / "t.csv"
        assert main(["simulate", str(CONFIGS / "eigenstate.json"), "-o", str(out)]) == 0
        _, _, rows = read_csv(out)
        assert np.all(rows[:, 3] == 5.0) and np.all(rows[:, 4] == 0.0)

    def test_path_index_matches_ensemble_stream(self, tmp_path):
        out = tmp_path / "t.csv"
        main(["simulate", write_config(tmp_path), "-o", str(out), "--path-index", "3"])
        _, _, rows = read_csv(out)
        from collapse_sim.closedform import simulate_trajectory

        cfg = RunConfig.load(write_config(tmp_path))
        p = simulate_trajectory(cfg.model(), cfg.params(), 3)
        assert np.array_equal(rows[:, 1], p.xi)


class TestEnsemble:
    def test_writes_summary_with_checks(self, tmp_path):
        out = tmp_path / "s.json"
        assert main(["ensemble", write_config(tmp_path), "-o", str(out), "--strict"]) == 0
        doc = json.loads(out.read_text())
        assert doc["n_paths"] == 300
        assert set(doc["tests"]) >= {"martingale", "potential", "terminal", "conditional_mean"}
        for key in ("h_mean", "v_mean"):
            assert len(doc[key]["times"]) == len(doc[key]["values"])

    def test_skip_tests(self, tmp_path):
        out = tmp_path / "s.json"
        main(["ensemble", write_config(tmp_path), "-o", str(out), "--skip-tests"])
        assert "tests" not in json.loads(out.read_text())

    def test_zero_paths_rejected(self, tmp_path, capsys):
        assert main(["ensemble", write_config(tmp_path, n_paths=0), "-o", str(tmp_path / "x")]) == 2
        assert "n_paths" in capsys.readouterr().err

    def test_strict_failure_exit_code(self, tmp_path, monkeypatch):
        from collapse_sim import cli
        from collapse_sim.ensemble import CheckReport

        monkeypatch.setattr(cli, "run_all_checks",
                            lambda *a, **k: {"terminal": CheckReport("terminal", False)})
        cfg = write_config(tmp_path)
        out = str(tmp_path / "s.json")
        assert main(["ensemble", cfg, "-o", out]) == 0
        assert main(["ensemble", cfg, "-o", out, "--strict"]) == 1
        assert json.loads(Path(out).read_text())["tests"]["terminal"]["passed"] is False

    def test_short_run_terminal_check_inconclusive(self, tmp_path):
        out = tmp_path / "s.json"
        main(["ensemble", write_config(tmp_path), "-o", str(out)])
        assert json.loads(out.read_text())["tests"]["terminal"]["passed"] is None

    def test_worker_env_override(self, tmp_path, monkeypatch):
        cfg = write_config(tmp_path)
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        monkeypatch.setenv("COLLAPSE_SIM_THREADS", "1")
        main(["ensemble", cfg, "-o", str(a)])
        monkeypatch.setenv("COLLAPSE_SIM_THREADS", "3")
        main(["ensemble", cfg, "-o", str(b)])
        assert a.read_bytes() == b.read_bytes()
        monkeypatch.setenv("COLLAPSE_SIM_THREADS", "lots")
        assert main(["ensemble", cfg, "-o", str(b)]) == 2


class TestValidate:
    def test_sweep(self, tmp_path):
        out = tmp_path / "v.json"
        cfg = write_config(tmp_path, levels=[{"energy": -1, "re": 1}, {"energy": 1, "re": 1}],
                           t_max=3, dt=0.01, checkpoints=[1, 2, 3])
        assert main(["validate", cfg, "-o", str(out), "--seeds", "30", "--strict"]) == 0
        doc = json.loads(out.read_text())
        errs = [lv["strong_error"] for lv in doc["levels"]]
        assert len(errs) == 3 and errs[0] > errs[1] > errs[2]
        assert doc["passed"] is True

    def test_eigenstate_machine_precision(self, tmp_path):
        out = tmp_path / "v.json"
        assert main(["validate", str(CONFIGS / "eigenstate.json"), "-o", str(out), "--seeds", "5"]) == 0
        doc = json.loads(out.read_text())
        assert doc["machine_precision"] is True and doc["passed"] is True

    def test_one_level_rejected(self, tmp_path):
        assert main(["validate", write_config(tmp_path), "--levels", "1"]) == 2


class TestTimescale:
    def test_table(self, tmp_path, capsys):
        cfg = write_config(tmp_path, levels=[{"energy": -1, "re": 1}, {"energy": 1, "re": 1}])
        assert main(["timescale", cfg, "--n", "10", "--times", "5", "20", "--unit", "rate"]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert lines[1] == "t,t_over_tau_r,beta_t,probability"
        first = [float(x) for x in lines[2].split(",")]
        assert first[2] == pytest.approx(5.0) and first[3] == pytest.approx(0.5, abs=1e-15)
        last = [float(x) for x in lines[3].split(",")]
        assert last[3] == pytest.approx(0.99961, abs=1e-5)

    def test_needs_two_states(self, tmp_path):
        cfg = write_config(tmp_path, levels=[{"energy": 0, "re": 1}, {"energy": 1, "re": 1},
                                             {"energy": 2, "re": 1}])
        assert main(["timescale", cfg]) == 2


class TestConfigHandling:
    def test_dump_config_round_trip(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        assert main(["simulate", cfg, "--dump-config", "--sigma", "0.5"]) == 0
        dumped = RunConfig.from_json(capsys.readouterr().out)
        assert dumped.sigma == 0.5
        assert dumped == RunConfig.load(cfg).override(sigma=0.5)
        assert RunConfig.from_json(dumped.to_json()) == dumped

    def test_set_override(self, tmp_path, capsys):
        main(["simulate", write_config(tmp_path), "--dump-config", "--set", "quadrature_per_tau=40"])
        assert json.loads(capsys.readouterr().out)["quadrature_per_tau"] == 40

    def test_bad_json_reports_position(self, tmp_path, capsys):
        p = tmp_path / "bad.json"
        p.write_text('{\n  "sigma": 1.0,\n  "levels": [}\n')
        assert main(["simulate", str(p)]) == 2
        assert "line 3" in capsys.readouterr().err

    def test_field_errors_name_the_field(self):
        with pytest.raises(ConfigError, match=r"levels\[1\]\.energy"):
            RunConfig.from_dict({"levels": [{"energy": 0, "re": 1}, {"energy": "x", "re": 1}]})
        with pytest.raises(ConfigError, match="unknown field"):
            RunConfig.from_dict({**BORN, "sigmaa": 1})
        with pytest.raises(ConfigError, match="checkpoints"):
            RunConfig.from_dict({**BORN, "checkpoints": [1, 50]})
        with pytest.raises(ConfigError, match="dt"):
            RunConfig.from_dict({**BORN, "dt": 0.03})

    def test_amplitude_aliases(self):
        a = RunConfig.from_dict({"levels": [{"energy": 0, "amplitude_re": 0.6, "amplitude_im": 0.8}]})
        assert a.levels == ((0.0, 0.6, 0.8),)

    def test_missing_config_is_io_error(self, tmp_path):
        assert main(["simulate", str(tmp_path / "nope.json")]) == 3

    def test_unwritable_output_is_io_error(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("")
        assert main(["simulate", write_config(tmp_path), "-o", str(blocker / "x.csv")]) == 3

    def test_shipped_configs_load(self):
        for p in CONFIGS.glob("*.json"):
            RunConfig.load(p).validate()
        assert RunConfig.load(CONFIGS / "degenerate.json").model().n_levels == 2

    def test_module_entry_point(self, tmp_path):
        r = subprocess.run([sys.executable, "-m", "collapse_sim", "timescale",
                            str(CONFIGS / "two_state.json")], capture_output=True, text=True)
        assert r.returncode == 0 and "probability" in r.stdout
