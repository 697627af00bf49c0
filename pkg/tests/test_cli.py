import csv
import time
from pathlib import Path

import numpy as np
import pytest

from laeo_lab.cli import main
from laeo_lab.config import ConfigError, ExperimentConfig, dump_toml, load_config, parse_override
from laeo_lab.dataset import load_dataset, load_success_set
from laeo_lab.experiments import METRIC_COLUMNS, MetricsRow, metrics_csv

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
SMOKE = str(CONFIGS / "grid5-smoke.toml")


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestConfig:
    @pytest.mark.parametrize("text,expected", [
        ("critic.steps=500", (["critic", "steps"], 500)),
        ("policy.lam=0.25", (["policy", "lam"], 0.25)),
        ("seeds=[1, 2]", (["seeds"], [1, 2])),
        ("method=bc", (["method"], "bc")),
        ('env_id="push2d"', (["env_id"], "push2d")),
        ("planner.keep_elites=false", (["planner", "keep_elites"], False)),
    ])
    def test_parse_override(self, text, expected):
        assert parse_override(text) == expected

    def test_override_applies(self):
        cfg = load_config(SMOKE, ["critic.steps=7", "policy.hidden=[4, 4]"], seed=3, out="/tmp/x")
        assert cfg.critic.steps == 7
        assert cfg.policy.hidden == (4, 4)
        assert cfg.seeds == [3]
        assert cfg.out_dir == "/tmp/x"

    @pytest.mark.parametrize("override", ["bogus=1", "critic.bogus=1", "method=sac", "dataset.quality=expert",
                                          "critic.gamma=1.5", "seeds=[]", "critic=3", "=3", "novalue"])
    def test_rejects_bad_config(self, override):
        with pytest.raises(ConfigError):
            load_config(None, [override])

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "nope.toml")

    def test_dump_round_trip(self, tmp_path):
        cfg = load_config(SMOKE)
        (tmp_path / "c.toml").write_text(dump_toml(cfg))
        assert load_config(tmp_path / "c.toml") == cfg

    @pytest.mark.parametrize("path", sorted(CONFIGS.glob("*.toml")), ids=lambda p: p.stem)
    def test_checked_in_configs_load(self, path):
        assert isinstance(load_config(path), ExperimentConfig)


class TestMetricsSchema:
    def test_header_and_blank_cells(self):
        text = metrics_csv([MetricsRow(0, 1.5, None, None, 0, "laeo", "grid5")])
        assert text.splitlines()[0] == ",".join(METRIC_COLUMNS)
        assert text.splitlines()[1] == "0,1.5,,,0,laeo,grid5"

    def test_success_rate_range(self):
        with pytest.raises(ValueError):
            MetricsRow(0, 1.0, 1.5, None, 0, "laeo", "grid5")


class TestCollect:
    @pytest.mark.parametrize("env_id", ["reach2d", "push2d"])
    @pytest.mark.parametrize("quality", ["medium", "hard"])
    def test_band(self, tmp_path, env_id, quality):
        assert main(["collect", "--out", str(tmp_path), "--override", f"env_id={env_id}",
                     "--override", f"dataset.quality={quality}"]) == 0
        ds = load_dataset(tmp_path / "dataset.jsonl")
        lo, hi = {"medium": (0.45, 0.55), "hard": (0.08, 0.12)}[quality]
        assert lo <= ds.success_rate() <= hi
        assert (tmp_path / "config.resolved.toml").exists()

    def test_single_success_example(self, tmp_path):
        assert main(["collect", "--out", str(tmp_path), "--override", "n_success_examples=1",
                     "--override", "dataset.n_trajectories=300"]) == 0
        assert len(load_success_set(tmp_path / "success.jsonl")) == 1

    def test_calibration_failure_reports_rates(self, tmp_path, capsys):
        code = main(["collect", "--out", str(tmp_path), "--override", "dataset.calibration_iters=1",
                     "--override", "dataset.n_trajectories=100"])
        err = capsys.readouterr().err
        assert code == 1
        assert "tried (noise, rate)" in err


class TestTrain:
    def test_smoke_under_a_minute(self, tmp_path):
        t0 = time.perf_counter()
        assert main(["train", "--config", SMOKE, "--out", str(tmp_path)]) == 0
        assert time.perf_counter() - t0 < 60
        rows = read_csv(tmp_path / "metrics.csv")
        assert list(rows[0]) == list(METRIC_COLUMNS)
        assert float(rows[-1]["eval_success_rate"]) > 0.5
        for name in ("summary.csv", "training.svg", "config.resolved.toml", "seed_0/timings.csv"):
            assert (tmp_path / name).exists()

    def test_collect_then_train_uses_files(self, tmp_path):
        assert main(["collect", "--config", SMOKE, "--out", str(tmp_path)]) == 0
        assert main(["train", "--config", SMOKE, "--out", str(tmp_path), "--override", "method=bc"]) == 0
        assert read_csv(tmp_path / "summary.csv")[0]["method"] == "bc"

    def test_unknown_key_exit_code(self, capsys):
        assert main(["train", "--override", "bogus=1"]) == 2
        assert "bogus" in capsys.readouterr().err


class TestEval:
    def test_eval_reach_checkpoint(self, tmp_path):
        tiny = ["--override", "dataset.n_trajectories=200", "--override", "critic.steps=50",
                "--override", "policy.steps=50", "--override", "eval_episodes=10", "--override", "n_success_examples=5"]
        assert main(["train", "--out", str(tmp_path), *tiny]) == 0
        assert main(["eval", "--out", str(tmp_path), "--deterministic", *tiny]) == 0
        rows = read_csv(tmp_path / "eval.csv")
        assert len(rows) == 1 and 0.0 <= float(rows[0]["success_rate"]) <= 1.0

    def test_missing_checkpoints(self, tmp_path):
        assert main(["eval", "--out", str(tmp_path)]) == 1


class TestSweep:
    def test_empty_values_is_usage_error(self, tmp_path):
        assert main(["sweep", "--config", SMOKE, "--out", str(tmp_path), "--axis", "n_success", "--values", ""]) == 2

    def test_partial_failures_recorded(self, tmp_path, capsys):
        # the classifier baselines have no gridworld pipeline, so their runs fail
        code = main(["sweep", "--config", SMOKE, "--out", str(tmp_path), "--axis", "n_success",
                     "--values", "1,5", "--methods", "laeo,oril"])
        assert code == 0
        agg = read_csv(tmp_path / "sweep.csv")
        status = {(r["value"], r["method"]): r["status"] for r in agg}
        assert status[("1", "laeo")] == "ok"
        assert status[("1", "oril")].startswith("1 of 1 runs failed")
        assert "failed" in capsys.readouterr().err
        assert (tmp_path / "sweep.svg").exists()


class TestOracleCheck:
    def test_passes(self, capsys):
        assert main(["oracle-check"]) == 0
        out = capsys.readouterr().out
        assert "Q-occupancy identity" in out and "FAIL" not in out

    def test_perturbed_gamma_fails(self, capsys):
        assert main(["oracle-check", "--perturb-gamma", "0.01"]) == 1
        assert "FAIL" in capsys.readouterr().out


def test_plan_cem_smoke(tmp_path):
    args = ["plan-cem", "--out", str(tmp_path), "--override", "dataset.n_trajectories=200",
            "--override", "critic.steps=50", "--override", "eval_episodes=2", "--override", "seeds=[0]",
            "--override", "planner.population=16", "--override", "planner.elites=4", "--override", "planner.iterations=2"]
    assert main(args) == 0
    rows = read_csv(tmp_path / "plan_cem.csv")
    assert {r["planner"] for r in rows} == {"cem", "random"}
    assert len(rows) == 12
    assert np.isfinite([float(r["mean_success"]) for r in rows]).all()
