import json
import subprocess
import sys
from pathlib import Path

import pytest

from pdsde.harness.cli import EXIT_CHECK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_OK, main
from pdsde.harness.config import ConfigError, config_hash, load_config, validate
from pdsde.harness.studies import run_experiment

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

DELAY_MODEL = {"kind": "delay", "tau": 0.25, "sigma": {"const": 1.0, "sin_u": 0.25}, "drift": {"cos_v": 0.25}, "c": 0.5625}
MARKOV_MODEL = {"kind": "markovian", "sigma": {"const": 1.0, "sin_x": 0.25}, "c": 0.5625}


def write(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return p


def small_strong():
    return {
        "experiment": "strong-rate",
        "model": DELAY_MODEL,
        "seed": 1,
        "num_paths": 60,
        "levels": [2, 4, 8],
        "fine_n": 64,
    }


class TestConfig:
    def test_shipped_configs_validate(self):
        for path in sorted(CONFIGS.glob("*.json")):
            cfg = load_config(path)
            assert cfg["experiment"]

    def test_unknown_key_rejected(self):
        cfg = small_strong() | {"colour": "blue"}
        with pytest.raises(ConfigError, match="colour"):
            validate(cfg)

    def test_missing_required(self):
        cfg = small_strong()
        del cfg["fine_n"]
        with pytest.raises(ConfigError):
            validate(cfg)

    def test_bad_term_name(self):
        cfg = small_strong()
        cfg["model"] = dict(DELAY_MODEL, sigma={"tan_u": 1.0})
        with pytest.raises(ConfigError):
            validate(cfg)

    def test_defaults_filled(self):
        cfg = validate(small_strong())
        assert cfg["T"] == 1.0 and cfg["p"] == 2.0 and cfg["workers"] == 1

    def test_hash_ignores_scheduling(self):
        a = validate(small_strong())
        b = validate(small_strong() | {"workers": 8, "output_dir": "/tmp/x"})
        c = validate(small_strong() | {"seed": 2})
        assert config_hash(a) == config_hash(b) != config_hash(c)

    def test_unreadable(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "absent.json")
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        with pytest.raises(ConfigError):
            load_config(bad)


class TestExitCodes:
    def test_success_writes_outputs(self, tmp_path, capsys):
        out = tmp_path / "out"
        assert main(["strong-rate", "--config", str(write(tmp_path, small_strong())), "--out", str(out)]) == EXIT_OK
        summary = json.loads((out / "summary.json").read_text())
        for key in ("config_hash", "seed", "version", "wall_clock_s", "workers"):
            assert key in summary
        assert (out / "strong_rate.csv").read_text().startswith("level,steps,error,stderr\n")
        assert json.loads(capsys.readouterr().out.strip())["config_hash"] == summary["config_hash"]

    def test_schema_violation(self, tmp_path):
        cfg = small_strong() | {"unexpected": 1}
        assert main(["strong-rate", "--config", str(write(tmp_path, cfg))]) == EXIT_CONFIG

    def test_subcommand_mismatch(self, tmp_path):
        assert main(["density-rate", "--config", str(write(tmp_path, small_strong()))]) == EXIT_CONFIG

    def test_model_error(self, tmp_path):
        cfg = small_strong()
        cfg["model"] = {"kind": "delay", "sigma": {"const": 1.0}}
        assert main(["strong-rate", "--config", str(write(tmp_path, cfg)), "--out", str(tmp_path / "o")]) == EXIT_CONFIG

    def test_infeasible_ibp(self, tmp_path, capsys):
        cfg = {
            "experiment": "density-rate",
            "model": MARKOV_MODEL,
            "seed": 1,
            "num_paths": 10,
            "levels": [1, 2, 3],
            "reference_level": 5,
            "method": "ibp",
        }
        code = main(["density-rate", "--config", str(write(tmp_path, cfg)), "--out", str(tmp_path / "o")])
        assert code == EXIT_INFEASIBLE
        assert "256" in capsys.readouterr().err

    def test_check_failure(self, tmp_path):
        cfg = small_strong() | {"acceptance": {"slope_min": 5.0}}
        argv = ["strong-rate", "--config", str(write(tmp_path, cfg)), "--out", str(tmp_path / "o")]
        assert main(argv) == EXIT_OK
        assert main(argv + ["--check"]) == EXIT_CHECK

    def test_module_entry_point(self, tmp_path):
        res = subprocess.run(
            [sys.executable, "-m", "pdsde", "strong-rate", "--config", str(write(tmp_path, small_strong())),
             "--out", str(tmp_path / "o")],
            capture_output=True,
            text=True,
        )
        assert res.returncode == 0, res.stderr


class TestReports:
    def test_constant_model_flags_exact(self):
        cfg = validate(
            {
                "experiment": "strong-rate",
                "model": {"kind": "constant", "sigma": 0.7, "drift": 0.3},
                "x0": 0.5,
                "seed": 7,
                "num_paths": 50,
                "levels": [2, 4, 8, 16],
                "fine_n": 128,
                "acceptance": {"exact_tol": 1e-10},
            }
        )
        bundle = run_experiment(cfg)
        res = bundle.summary["results"]
        assert res["flag"] == "exact"
        assert res["strong"]["slope"] is None
        assert bundle.passed

    def test_rerun_is_byte_identical(self, tmp_path):
        cfg = validate(small_strong())
        a = run_experiment(cfg).files
        b = run_experiment(cfg).files
        assert a == b

    def test_ellipticity_report(self):
        cfg = validate(
            {
                "experiment": "ellipticity-check",
                "model": MARKOV_MODEL,
                "seed": 3,
                "num_paths": 300,
                "steps": 16,
                "acceptance": {"det_factor": 0.1, "max_degenerate": 0},
            }
        )
        bundle = run_experiment(cfg)
        assert bundle.passed
        assert bundle.summary["results"]["degenerate_samples"] == 0
