import json
import os

import numpy as np
import pytest

from deeppark import cli
from deeppark.config import ConfigInvalid, config_from_dict, load_config


def _toy_config(tmp_path, **extra):
    data = {
        "task": "driver",
        "regime": "B",
        "seed": 7,
        "out": str(tmp_path / "run"),
        "scenario": {"lane_width": [16.0, 24.0], "max_turns": 0,
                     "target_distance": [5.0, 15.0], "bay_fraction": 0.0},
        "train": {"rollout_steps": 96, "minibatch": 24, "opt_steps": 2,
                  "horizon": 40, "max_epochs": 2, "checkpoint_every": 1},
    }
    data.update(extra)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(data))
    return path


# ---------------------------------------------------------------------------
# config parsing

def test_defaults_match_published_values():
    cfg = config_from_dict({})
    assert cfg.train.rollout_steps == 16384
    assert cfg.train.minibatch == 1024
    assert cfg.train.opt_steps == 16
    assert cfg.train.horizon == 250
    assert cfg.train.gamma == 0.99
    assert cfg.train.gae_lambda == 0.95
    assert cfg.train.clip == 0.1
    assert cfg.train.value_scale == 0.1
    assert cfg.train.lr == 5e-5
    assert cfg.train.adam_beta1 == 0.9
    assert cfg.train.adam_beta2 == 0.999
    assert cfg.train.adam_eps == 1e-5
    assert cfg.train.max_epochs == 350
    assert cfg.reward.proximity_weight == 0.1
    assert cfg.reward.speed_weight == 0.5
    assert cfg.reward.steer_weight == 0.5
    assert cfg.reward.goal_bonus == 50.0


def test_unknown_keys_rejected():
    with pytest.raises(ConfigInvalid):
        config_from_dict({"bogus": 1})
    with pytest.raises(ConfigInvalid):
        config_from_dict({"train": {"learning_rate": 1e-3}})
    with pytest.raises(ConfigInvalid):
        config_from_dict({"reward": {"task": "driver"}})
    with pytest.raises(ConfigInvalid):
        config_from_dict({"task": "parker"})
    with pytest.raises(ConfigInvalid):
        config_from_dict({"regime": "C"})
    with pytest.raises(ConfigInvalid):
        config_from_dict({"scenario": {"lane_width": [1, 2, 3]}})


def test_regime_controls_obstacles():
    assert config_from_dict({"regime": "A"}).scenario.obstacles is True
    assert config_from_dict({"regime": "B"}).scenario.obstacles is False


def test_missing_config_file():
    with pytest.raises(ConfigInvalid):
        load_config("/nonexistent/config.json")


# ---------------------------------------------------------------------------
# commands

def test_train_missing_config_exits_2(tmp_path, capsys):
    code = cli.main(["train", "--config", str(tmp_path / "nope.json")])
    assert code == cli.EXIT_CONFIG


def test_train_smoke_writes_artifacts(tmp_path):
    cfg = _toy_config(tmp_path)
    assert cli.main(["train", "--config", str(cfg)]) == 0
    run = tmp_path / "run"
    assert (run / "training_log.csv").exists()
    assert (run / "checkpoint_final.npz").exists()
    lines = (run / "training_log.csv").read_text().strip().splitlines()
    assert len(lines) == 3


def test_train_seed_repeatable_and_workers_equivalent(tmp_path):
    cfg = _toy_config(tmp_path)
    assert cli.main(["train", "--config", str(cfg), "--seed", "7",
                     "--out", str(tmp_path / "a")]) == 0
    assert cli.main(["train", "--config", str(cfg), "--seed", "7",
                     "--out", str(tmp_path / "b")]) == 0
    assert cli.main(["train", "--config", str(cfg), "--seed", "7",
                     "--workers", "4", "--out", str(tmp_path / "c")]) == 0
    log_a = (tmp_path / "a" / "training_log.csv").read_bytes()
    log_b = (tmp_path / "b" / "training_log.csv").read_bytes()
    log_c = (tmp_path / "c" / "training_log.csv").read_bytes()
    assert log_a == log_b == log_c


def test_evaluate_report(tmp_path, capsys):
    cfg = _toy_config(tmp_path)
    assert cli.main(["train", "--config", str(cfg)]) == 0
    ckpt = str(tmp_path / "run" / "checkpoint_final.npz")
    report = str(tmp_path / "report.csv")
    assert cli.main(["evaluate", ckpt, "--config", str(cfg), "--tasks", "12",
                     "--out", report]) == 0
    lines = open(report).read().strip().splitlines()
    assert len(lines) == 2
    row = dict(zip(lines[0].split(","), lines[1].split(",")))
    assert row["tasks"] == "12"
    pct = sum(float(row[k]) for k in ("success_pct", "collision_pct",
                                      "timeout_pct", "overspeed_pct"))
    assert abs(pct - 100.0) <= 0.1
    assert float(row["normalized_reward"]) == 1.0


def test_evaluate_controller_arity(tmp_path):
    cfg = _toy_config(tmp_path)
    assert cli.main(["train", "--config", str(cfg)]) == 0
    ckpt = str(tmp_path / "run" / "checkpoint_final.npz")
    assert cli.main(["evaluate", ckpt, "--controller",
                     "--config", str(cfg)]) == cli.EXIT_CONFIG
    assert cli.main(["evaluate", ckpt, ckpt, "--controller", "--config",
                     str(cfg), "--tasks", "6"]) == 0


def test_gen_scenarios_and_attention_and_replay(tmp_path):
    cfg = _toy_config(tmp_path)
    scn_dir = tmp_path / "scn"
    assert cli.main(["gen-scenarios", "--config", str(cfg), "--count", "3",
                     "--out", str(scn_dir)]) == 0
    files = sorted(os.listdir(scn_dir))
    assert files == ["scenario_0000.json", "scenario_0001.json",
                     "scenario_0002.json"]

    assert cli.main(["train", "--config", str(cfg)]) == 0
    ckpt = str(tmp_path / "run" / "checkpoint_final.npz")
    att = tmp_path / "attention.csv"
    assert cli.main(["attention", "--checkpoint", ckpt,
                     "--scenario", str(scn_dir / "scenario_0000.json"),
                     "--out", str(att)]) == 0
    grid = np.loadtxt(att, delimiter=",")
    assert grid.shape == (16, 16)
    assert np.all(grid >= 0.0)
    assert (tmp_path / "attention.input.csv").exists()

    # produce a trace by replaying a policy over scenario 0
    from deeppark.controller import GreedyPolicy, run_task
    from deeppark.env import RewardConfig, write_trace
    from deeppark.nets import load_checkpoint
    from deeppark.world import load_scenario
    policy, _, _, _, _ = load_checkpoint(ckpt)
    scenario = load_scenario(scn_dir / "scenario_0000.json")
    episode, _ = run_task(GreedyPolicy(policy), scenario, RewardConfig(),
                          horizon=30, record=True)
    trace = tmp_path / "trace.csv"
    write_trace(trace, episode)
    out = tmp_path / "replay.json"
    assert cli.main(["replay", "--trace", str(trace),
                     "--scenario", str(scn_dir / "scenario_0000.json"),
                     "--out", str(out)]) == 0
    data = json.loads(out.read_text())
    assert len(data["path"]) == episode.t

    # mismatched scenario: I/O failure exit code
    assert cli.main(["replay", "--trace", str(trace),
                     "--scenario", str(scn_dir / "scenario_0001.json"),
                     "--out", str(out)]) == cli.EXIT_IO
