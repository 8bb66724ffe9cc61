"""Run configuration: a strict JSON file mapped onto the component configs.

Every field defaults to the published hyperparameter set; unknown keys are
rejected so typos cannot silently fall back to defaults.
"""

import dataclasses
import json
from dataclasses import dataclass, field

from . import env as envm
from .env import RewardConfig
from .ppo import TrainConfig, Trainer
from .world import GridSpec, ScenarioConfig


class ConfigInvalid(ValueError):
    """Config file missing, unparsable, or containing unknown/bad keys."""


_TOP_KEYS = {"task", "regime", "seed", "workers", "out", "d_max", "rays",
             "max_range", "eval_tasks", "train", "reward", "grid", "scenario"}
_REWARD_KEYS = {"proximity_weight", "speed_weight", "steer_weight",
                "goal_bonus", "crash_penalty", "position_tol", "heading_tol",
                "stop_speed_tol"}
_TUPLE_FIELDS = {"lane_width", "target_distance", "target_speed",
                 "obstacle_count"}


@dataclass(frozen=True)
class RunConfig:
    task: str = envm.DRIVER
    regime: str = "B"            # A: obstacle vehicles in training, B: none
    seed: int = 0
    workers: int = 1
    out: str = "runs/out"
    d_max: float = envm.D_MAX
    rays: int = 360
    max_range: float = 20.0
    eval_tasks: int = 1000
    train: TrainConfig = field(default_factory=TrainConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    grid: GridSpec = field(default_factory=GridSpec)
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)


def _build_section(cls, data: dict, name: str, allowed=None):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    allowed = allowed if allowed is not None else set(fields)
    unknown = set(data) - allowed
    if unknown:
        raise ConfigInvalid(f"unknown key(s) in '{name}': {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        if key in _TUPLE_FIELDS:
            if (not isinstance(value, (list, tuple)) or len(value) != 2):
                raise ConfigInvalid(f"'{name}.{key}' must be a 2-element list")
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigInvalid(f"bad '{name}' section: {exc}") from None


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigInvalid("config root must be an object")
    unknown = set(data) - _TOP_KEYS
    if unknown:
        raise ConfigInvalid(f"unknown top-level key(s): {sorted(unknown)}")
    task = data.get("task", envm.DRIVER)
    if task not in (envm.DRIVER, envm.STOPPER):
        raise ConfigInvalid(f"task must be driver or stopper, got {task!r}")
    regime = data.get("regime", "B")
    if regime not in ("A", "B"):
        raise ConfigInvalid(f"regime must be 'A' or 'B', got {regime!r}")

    train = _build_section(TrainConfig, data.get("train", {}), "train")
    reward = _build_section(RewardConfig, data.get("reward", {}), "reward",
                            _REWARD_KEYS)
    grid = _build_section(GridSpec, data.get("grid", {}), "grid")
    scenario = _build_section(ScenarioConfig, data.get("scenario", {}),
                              "scenario")
    scenario = dataclasses.replace(scenario, obstacles=(regime == "A"))

    simple = {k: data[k] for k in
              ("seed", "workers", "out", "d_max", "rays", "max_range",
               "eval_tasks") if k in data}
    return RunConfig(task=task, regime=regime, train=train, reward=reward,
                     grid=grid, scenario=scenario, **simple)


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise ConfigInvalid(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigInvalid(f"config is not valid JSON: {exc}") from None
    return config_from_dict(data)


def apply_overrides(cfg: RunConfig, seed=None, workers=None, out=None,
                    epochs=None) -> RunConfig:
    updates = {}
    if seed is not None:
        updates["seed"] = seed
    if workers is not None:
        updates["workers"] = workers
    if out is not None:
        updates["out"] = out
    if epochs is not None:
        updates["train"] = dataclasses.replace(cfg.train, max_epochs=epochs)
    return dataclasses.replace(cfg, **updates) if updates else cfg


def make_trainer(cfg: RunConfig) -> Trainer:
    return Trainer(
        task=cfg.task, seed=cfg.seed, train=cfg.train, reward=cfg.reward,
        scenario=cfg.scenario, grid=cfg.grid, rays=cfg.rays,
        max_range=cfg.max_range, d_max=cfg.d_max, workers=cfg.workers,
        out_dir=cfg.out,
    )
