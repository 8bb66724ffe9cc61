"""The episodic control MDP: observations, shaped rewards, termination, and
the step loop.

Two task flavors share the machinery: DRIVER episodes succeed on reaching
the target position (speed matching is shaped, not required), STOPPER
episodes additionally require coming to rest there.  Reward shaping runs in
two phases: phase 1 pays proximity (plus, for STOPPER, an extra-weighted
speed term), phase 2 adds speed and steering comfort terms.
"""

import enum
import math
from dataclasses import dataclass, replace

import numpy as np

from . import world as w
from .dynamics import (
    SPEED_MAX,
    STEER_MAX,
    STEP_SECONDS,
    Action,
    VehicleGeometry,
    VehicleState,
    step_raw,
    wrap_angle,
)

DRIVER = "driver"
STOPPER = "stopper"

D_MAX = 50.0           # relative-position clip for the observation
DEFAULT_HORIZON = 250  # steps per episode


class Termination(enum.Enum):
    RUNNING = "running"
    SUCCESS = "success"
    COLLISION = "collision"
    TIMEOUT = "timeout"
    OVERSPEED = "overspeed"


@dataclass(frozen=True)
class RewardConfig:
    task: str = DRIVER
    phase: int = 1
    proximity_weight: float = 0.1   # c_p
    speed_weight: float = 0.5       # c_v
    steer_weight: float = 0.5       # c_beta
    goal_bonus: float = 50.0        # r_0
    # Subtracted on collision/overspeed terminations.  Zero by default:
    # losing the episode's remaining shaped income is already a penalty,
    # and an extra -r0/2 makes "brake and hide until timeout" dominate the
    # early policy at the published learning rate.
    crash_penalty: float = 0.0
    position_tol: float = 0.5       # m
    heading_tol: float = 0.2        # rad
    stop_speed_tol: float = 0.1     # m/s

    def __post_init__(self):
        if self.task not in (DRIVER, STOPPER):
            raise ValueError(f"unknown task {self.task!r}")
        if self.phase not in (1, 2):
            raise ValueError("phase must be 1 or 2")
        for name in ("proximity_weight", "speed_weight", "steer_weight",
                     "goal_bonus"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")
        for name in ("position_tol", "heading_tol", "stop_speed_tol"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")
        if self.crash_penalty < 0.0:
            raise ValueError("crash_penalty cannot be negative")


@dataclass(frozen=True)
class Observation:
    features: np.ndarray   # (7,) scaled to [-1, 1]
    grid: np.ndarray       # (rows, cols) int8 in {-1, 0, 1}


def observe_features(state: VehicleState, scenario: w.Scenario,
                     d_max: float = D_MAX) -> np.ndarray:
    """The 7 scaled scalar features: relative target position in the vehicle
    frame, own and target speed, steering angle, and the relative heading as
    a complex pair (discontinuity-free)."""
    tgt = scenario.target
    dx, dy = tgt.x - state.x, tgt.y - state.y
    c, s = math.cos(state.heading), math.sin(state.heading)
    rel_x = min(max(c * dx + s * dy, -d_max), d_max)
    rel_y = min(max(-s * dx + c * dy, -d_max), d_max)
    rel_heading = wrap_angle(tgt.heading - state.heading)
    return np.array([
        rel_x / d_max,
        rel_y / d_max,
        state.speed / SPEED_MAX,
        tgt.speed / SPEED_MAX,
        state.steer / STEER_MAX,
        math.cos(rel_heading),
        math.sin(rel_heading),
    ])


def observe(state: VehicleState, scenario: w.Scenario,
            grid_spec: w.GridSpec = w.GridSpec(), rays: int = 360,
            max_range: float = 20.0, d_max: float = D_MAX,
            noise_std: float = 0.0, rng=None) -> Observation:
    sensor = w.scan(state, scenario, rays, max_range, noise_std, rng)
    grid = w.render_grid(state, scenario, sensor, grid_spec)
    return Observation(observe_features(state, scenario, d_max), grid)


def initial_distance(scenario: w.Scenario) -> float:
    """Start-to-target distance; the episode-wide proximity normalizer."""
    return math.hypot(scenario.target.x - scenario.start.x,
                      scenario.target.y - scenario.start.y)


def reward(prev: VehicleState, nxt: VehicleState, action: Action,
           scenario: w.Scenario, cfg: RewardConfig, term: Termination,
           d_norm: float = None, bonus_pending: bool = True):
    """Shaped reward for one transition; returns (value, bonus_granted).

    The proximity term is quadratic in distance, 1 at the target and 0 from
    d_norm (the episode's initial distance) outward.  The position bonus
    r_0 is paid once per episode, on the first step inside the position
    tolerance; half of it again if the heading also matches on that step.
    """
    tgt = scenario.target
    if d_norm is None:
        d_norm = initial_distance(scenario)
    dist = math.hypot(tgt.x - nxt.x, tgt.y - nxt.y)
    proximity = max(0.0, 1.0 - (dist / d_norm) ** 2)
    value = cfg.proximity_weight * proximity

    speed_term = 1.0 - ((nxt.speed - tgt.speed) / SPEED_MAX) ** 2
    steer_term = 1.0 - (nxt.steer / STEER_MAX) ** 2
    if cfg.task == STOPPER and cfg.phase == 1:
        value += 2.0 * cfg.speed_weight * speed_term
    elif cfg.phase == 2:
        value += cfg.speed_weight * speed_term + cfg.steer_weight * steer_term

    granted = False
    if bonus_pending and dist <= cfg.position_tol:
        granted = True
        value += cfg.goal_bonus
        if abs(wrap_angle(tgt.heading - nxt.heading)) <= cfg.heading_tol:
            value += 0.5 * cfg.goal_bonus

    if term in (Termination.COLLISION, Termination.OVERSPEED):
        value -= cfg.crash_penalty
    return value, granted


def check_termination(state: VehicleState, t: int, scenario: w.Scenario,
                      cfg: RewardConfig, geom: VehicleGeometry = VehicleGeometry(),
                      raw_speed: float = None,
                      horizon: int = DEFAULT_HORIZON) -> Termination:
    """Episode status after step t.  raw_speed is the integrated speed
    before saturation; exceeding the cap terminates even though the stored
    state is clamped.  Priority: collision > overspeed > success > timeout.
    """
    if w.collides(state, geom, scenario):
        return Termination.COLLISION
    if raw_speed is not None and raw_speed > SPEED_MAX:
        return Termination.OVERSPEED
    tgt = scenario.target
    dist = math.hypot(tgt.x - state.x, tgt.y - state.y)
    if dist <= cfg.position_tol:
        if cfg.task == DRIVER or state.speed <= cfg.stop_speed_tol:
            return Termination.SUCCESS
    if t >= horizon:
        return Termination.TIMEOUT
    return Termination.RUNNING


@dataclass(frozen=True)
class StepResult:
    state: VehicleState
    observation: Observation
    reward: float
    termination: Termination
    bonus_granted: bool


def env_step(state: VehicleState, action: Action, t: int,
             scenario: w.Scenario, cfg: RewardConfig,
             geom: VehicleGeometry = VehicleGeometry(),
             grid_spec: w.GridSpec = w.GridSpec(),
             dt: float = STEP_SECONDS, rays: int = 360,
             max_range: float = 20.0, d_max: float = D_MAX,
             d_norm: float = None, bonus_pending: bool = True,
             horizon: int = DEFAULT_HORIZON) -> StepResult:
    """One MDP transition: integrate, classify termination, score, observe.

    t is the step index before the transition; the returned observation
    belongs to the successor state.
    """
    nxt, raw_speed = step_raw(state, action, dt, geom.wheelbase)
    term = check_termination(nxt, t + 1, scenario, cfg, geom, raw_speed, horizon)
    value, granted = reward(state, nxt, action, scenario, cfg, term,
                            d_norm, bonus_pending)
    obs = observe(nxt, scenario, grid_spec, rays, max_range, d_max)
    return StepResult(nxt, obs, value, term, granted)


def advance_phase(success_history, phase: int, threshold: float = 0.7,
                  window: int = 20) -> int:
    """Phase 1 -> 2 once the trailing-window success rate clears the
    threshold; never switches back."""
    if phase >= 2:
        return 2
    recent = list(success_history)[-window:]
    if len(recent) >= window and sum(recent) / len(recent) >= threshold:
        return 2
    return phase


class Episode:
    """One episode against a fixed scenario; owns the per-episode state
    (clock, goal-bonus bookkeeping, optional trace)."""

    def __init__(self, scenario: w.Scenario, cfg: RewardConfig,
                 geom: VehicleGeometry = VehicleGeometry(),
                 grid_spec: w.GridSpec = w.GridSpec(),
                 rays: int = 360, max_range: float = 20.0,
                 dt: float = STEP_SECONDS, horizon: int = DEFAULT_HORIZON,
                 d_max: float = D_MAX, record: bool = False):
        self.scenario = scenario
        self.cfg = cfg
        self.geom = geom
        self.grid_spec = grid_spec
        self.rays = rays
        self.max_range = max_range
        self.dt = dt
        self.horizon = horizon
        self.d_max = d_max
        self.record = record
        self.d_norm = initial_distance(scenario)
        self.reset()

    def reset(self) -> Observation:
        self.state = self.scenario.start
        self.t = 0
        self.total_reward = 0.0
        self.termination = Termination.RUNNING
        self.bonus_pending = True
        self.trace = []
        return observe(self.state, self.scenario, self.grid_spec,
                       self.rays, self.max_range, self.d_max)

    @property
    def done(self) -> bool:
        return self.termination is not Termination.RUNNING

    def step(self, action: Action) -> StepResult:
        if self.done:
            raise RuntimeError("episode already terminated")
        result = env_step(
            self.state, action, self.t, self.scenario, self.cfg,
            self.geom, self.grid_spec, self.dt, self.rays, self.max_range,
            self.d_max, self.d_norm, self.bonus_pending, self.horizon,
        )
        self.t += 1
        self.state = result.state
        self.termination = result.termination
        self.total_reward += result.reward
        if result.bonus_granted:
            self.bonus_pending = False
        if self.record:
            self.trace.append((
                self.t, result.state.x, result.state.y, result.state.speed,
                result.state.heading, result.state.steer,
                action.accel, action.steer_rate, result.reward,
                result.termination.value,
            ))
        return result


def stopper_config(cfg: RewardConfig) -> RewardConfig:
    return replace(cfg, task=STOPPER)


# ---------------------------------------------------------------------------
# episode trace files

TRACE_FORMAT = "deeppark-trace-v1"
TRACE_COLUMNS = ("t", "x", "y", "speed", "heading", "steer",
                 "accel", "steer_rate", "reward", "termination")


def write_trace(path, episode: Episode) -> None:
    """Delimited-text episode log for replay and plotting."""
    scenario_id = episode.scenario.content_id()
    with open(path, "w") as fh:
        fh.write(f"# {TRACE_FORMAT} scenario={scenario_id} "
                 f"task={episode.cfg.task} phase={episode.cfg.phase}\n")
        fh.write(",".join(TRACE_COLUMNS) + "\n")
        for row in episode.trace:
            fh.write(",".join(
                repr(v) if isinstance(v, float) else str(v) for v in row
            ) + "\n")


def read_trace(path) -> dict:
    """Parse a trace file into {'meta': ..., 'rows': list of tuples}."""
    with open(path) as fh:
        header = fh.readline().strip()
        if not header.startswith(f"# {TRACE_FORMAT}"):
            raise ValueError(f"not a {TRACE_FORMAT} file: {path}")
        meta = dict(part.split("=", 1) for part in header.split()[2:])
        columns = fh.readline().strip().split(",")
        if tuple(columns) != TRACE_COLUMNS:
            raise ValueError(f"unexpected trace columns in {path}")
        rows = []
        for line in fh:
            parts = line.strip().split(",")
            if not parts or parts == [""]:
                continue
            rows.append((int(parts[0]), *map(float, parts[1:9]), parts[9]))
    return {"meta": meta, "rows": rows}
