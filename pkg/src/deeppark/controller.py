"""The deployed controller and the batch evaluation / analysis harness.

At inference the policy is deterministic: the action is the Gaussian mean.
A full controller pairs two specialist policies and routes on the task's
target speed (exactly zero selects the stopping specialist); the
steering-rate command is integrated one 20 ms control period ahead to give
the low-level actuator a desired steering angle.
"""

import time
from dataclasses import dataclass, replace

import numpy as np

from . import env as envm
from . import world as w
from .dynamics import STEER_MAX, SPEED_MAX, Action, VehicleGeometry
from .env import Episode, Observation, RewardConfig, Termination
from .nets import PolicyNet, load_checkpoint

STEER_INTEGRATION_SECONDS = 0.02
EVAL_SALT = 7


class TraceCorrupt(ValueError):
    """Trace file does not parse or does not belong to the given scenario."""


@dataclass(frozen=True)
class ControlOutput:
    action: Action          # deterministic (mean) action, already bounded
    desired_steer: float    # steer angle after integrating the rate 20 ms
    mode: str               # which specialist produced the action
    latency_ms: float       # forward-pass wall time


class GreedyPolicy:
    """Single policy, deterministic inference."""

    def __init__(self, policy: PolicyNet, mode: str = "single"):
        self.policy = policy
        self.mode = mode

    def act(self, obs: Observation) -> ControlOutput:
        start = time.perf_counter()
        out = self.policy.forward(obs.features[None, :], obs.grid[None, :, :])
        latency = (time.perf_counter() - start) * 1e3
        action = Action(float(out.mu[0, 0]), float(out.mu[0, 1]))
        steer_now = float(obs.features[4]) * STEER_MAX
        desired = steer_now + action.steer_rate * STEER_INTEGRATION_SECONDS
        desired = min(max(desired, -STEER_MAX), STEER_MAX)
        return ControlOutput(action, desired, self.mode, latency)

    def clone_shared(self):
        return GreedyPolicy(self.policy.clone_shared(), self.mode)


class DeepController:
    """Two specialists behind one control interface.

    The stopping specialist handles tasks whose target speed is exactly
    zero; everything else goes to the driving specialist.
    """

    def __init__(self, driver: PolicyNet, stopper: PolicyNet):
        self.driver = GreedyPolicy(driver, envm.DRIVER)
        self.stopper = GreedyPolicy(stopper, envm.STOPPER)

    @classmethod
    def from_checkpoints(cls, driver_path, stopper_path):
        driver, _, _, _, _ = load_checkpoint(driver_path)
        stopper, _, _, _, _ = load_checkpoint(stopper_path)
        return cls(driver, stopper)

    def act(self, obs: Observation) -> ControlOutput:
        target_speed = float(obs.features[3]) * SPEED_MAX
        agent = self.stopper if target_speed == 0.0 else self.driver
        return agent.act(obs)

    def clone_shared(self):
        return DeepController(self.driver.policy.clone_shared(),
                              self.stopper.policy.clone_shared())


def attention_map(policy: PolicyNet, obs: Observation) -> np.ndarray:
    """Saliency of the perception input: element-wise sum of the squared
    first-stage feature maps (post-activation, post-pool)."""
    policy.forward(obs.features[None, :], obs.grid[None, :, :])
    maps = policy.feature_maps[0]        # (rows/2, cols/2, C)
    return (maps ** 2).sum(axis=-1)


# ---------------------------------------------------------------------------
# batch evaluation

@dataclass(frozen=True)
class ReportRow:
    name: str
    tasks: int
    mean_reward: float
    normalized_reward: float
    success_pct: float
    collision_pct: float
    timeout_pct: float
    overspeed_pct: float
    mean_latency_ms: float
    max_latency_ms: float


@dataclass(frozen=True)
class EvaluationReport:
    rows: tuple

    # latency statistics are logged on the console (they are wall-clock
    # noise); the report file carries only the reproducible columns
    COLUMNS = ("policy", "tasks", "mean_reward", "normalized_reward",
               "success_pct", "collision_pct", "timeout_pct",
               "overspeed_pct")

    def to_csv(self) -> str:
        lines = [",".join(self.COLUMNS)]
        for r in self.rows:
            lines.append(",".join([
                r.name, str(r.tasks), repr(r.mean_reward),
                repr(r.normalized_reward), repr(r.success_pct),
                repr(r.collision_pct), repr(r.timeout_pct),
                repr(r.overspeed_pct),
            ]))
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        head = (f"{'Policy':<12} {'Rew.':>6} {'Succ.':>6} {'Coll.':>6} "
                f"{'Time':>6} {'Speed':>6} {'lat[ms]':>8}")
        lines = [head, "-" * len(head)]
        for r in self.rows:
            lines.append(
                f"{r.name:<12} {r.normalized_reward:>6.3f} "
                f"{r.success_pct:>6.1f} {r.collision_pct:>6.1f} "
                f"{r.timeout_pct:>6.1f} {r.overspeed_pct:>6.1f} "
                f"{r.mean_latency_ms:>8.2f}")
        return "\n".join(lines)


def run_task(agent, scenario: w.Scenario, reward_cfg: RewardConfig,
             geom: VehicleGeometry = VehicleGeometry(),
             grid: w.GridSpec = w.GridSpec(), rays: int = 360,
             max_range: float = 20.0, horizon: int = envm.DEFAULT_HORIZON,
             record: bool = False):
    """Run one episode under deterministic control; returns the Episode and
    the per-call latencies."""
    episode = Episode(scenario, reward_cfg, geom, grid, rays, max_range,
                      horizon=horizon, record=record)
    obs = episode.reset()
    latencies = []
    while not episode.done:
        control = agent.act(obs)
        latencies.append(control.latency_ms)
        obs = episode.step(control.action).observation
    return episode, latencies


def evaluate(agents, n_tasks: int, scenario_cfg: w.ScenarioConfig,
             seed: int = 0, reward_cfg: RewardConfig = None,
             geom: VehicleGeometry = VehicleGeometry(),
             grid: w.GridSpec = w.GridSpec(), rays: int = 360,
             max_range: float = 20.0,
             horizon: int = envm.DEFAULT_HORIZON,
             workers: int = 1) -> EvaluationReport:
    """Run every agent over the same seeded task set and tabulate
    termination statistics; mean rewards are normalized to the best agent
    in the comparison (the best row reads 1.0).

    `agents` is a {name: agent} mapping or a single agent.  Tasks are
    independent, so `workers` threads may run them concurrently; results
    are aggregated in task order and identical for any worker count.
    """
    if not isinstance(agents, dict):
        agents = {"policy": agents}
    base = reward_cfg or RewardConfig(phase=2)
    scenario_seeds = [
        int(np.random.SeedSequence([seed, EVAL_SALT, i]).generate_state(
            1, np.uint64)[0] >> 1)
        for i in range(n_tasks)
    ]

    def one_task(agent, sseed):
        scenario = w.generate_scenario(scenario_cfg, sseed, geom)
        cfg = replace(base, task=(envm.STOPPER
                                  if scenario.target.speed == 0.0
                                  else envm.DRIVER))
        episode, latencies = run_task(agent, scenario, cfg, geom, grid,
                                      rays, max_range, horizon)
        return episode.termination, episode.total_reward, latencies

    stats = {}
    for name, agent in agents.items():
        if workers > 1 and hasattr(agent, "clone_shared"):
            import threading
            from concurrent.futures import ThreadPoolExecutor
            local = threading.local()

            def task_in_thread(sseed, _agent=agent):
                # one shared-parameter clone per pool thread: forward caches
                # stay private while weights are shared read-only
                if not hasattr(local, "agent"):
                    local.agent = _agent.clone_shared()
                return one_task(local.agent, sseed)

            with ThreadPoolExecutor(max_workers=workers) as pool:
                outcomes = list(pool.map(task_in_thread, scenario_seeds))
        else:
            outcomes = [one_task(agent, sseed) for sseed in scenario_seeds]
        counts = {k: 0 for k in Termination}
        rewards = []
        lat = []
        for termination, total, latencies in outcomes:
            counts[termination] += 1
            rewards.append(total)
            lat.extend(latencies)
        stats[name] = (counts, float(np.mean(rewards)), lat)

    best = max(mean for _, mean, _ in stats.values())
    rows = []
    for name, (counts, mean_reward, lat) in stats.items():
        pct = {k: 100.0 * v / n_tasks for k, v in counts.items()}
        normalized = (mean_reward / best if best != 0.0
                      else 1.0 if mean_reward == best else 0.0)
        rows.append(ReportRow(
            name=name, tasks=n_tasks, mean_reward=mean_reward,
            normalized_reward=normalized,
            success_pct=pct[Termination.SUCCESS],
            collision_pct=pct[Termination.COLLISION],
            timeout_pct=pct[Termination.TIMEOUT],
            overspeed_pct=pct[Termination.OVERSPEED],
            mean_latency_ms=float(np.mean(lat)),
            max_latency_ms=float(np.max(lat)),
        ))
    return EvaluationReport(tuple(rows))


# ---------------------------------------------------------------------------
# trace replay

def replay(trace_path, scenario: w.Scenario) -> dict:
    """Turn a recorded episode into plot data: boundary, obstacles, path,
    sensor hits of the initial state, and speed/steering curves normalized
    to their running maxima.

    Raises TraceCorrupt when the trace does not match the scenario.
    """
    try:
        trace = envm.read_trace(trace_path)
    except ValueError as exc:
        raise TraceCorrupt(str(exc)) from None
    expected = scenario.content_id()
    got = trace["meta"].get("scenario")
    if got != expected:
        raise TraceCorrupt(
            f"trace belongs to scenario {got}, not {expected}")
    rows = trace["rows"]
    if not rows:
        raise TraceCorrupt("trace has no steps")

    path = np.array([[r[1], r[2]] for r in rows])
    speed = np.array([r[3] for r in rows])
    steer = np.array([r[5] for r in rows])
    sensor = w.scan(scenario.start, scenario)
    speed_norm = float(np.max(np.abs(speed))) or 1.0
    return {
        "scenario_id": expected,
        "meta": trace["meta"],
        "boundary": scenario.boundary.tolist(),
        "obstacles": [o.corners().tolist() for o in scenario.obstacles],
        "start": list(scenario.start),
        "target": [scenario.target.x, scenario.target.y,
                   scenario.target.heading, scenario.target.speed],
        "sensor_hits": w.scan_points(scenario.start, sensor).tolist(),
        "path": path.tolist(),
        "t": [r[0] for r in rows],
        "speed": speed.tolist(),
        "steer": steer.tolist(),
        "speed_normalized": (speed / speed_norm).tolist(),
        "steer_normalized": (steer / STEER_MAX).tolist(),
        "reward": [r[8] for r in rows],
        "termination": rows[-1][9],
    }


def render_replay_png(plot_data: dict, out_path) -> None:
    """Optional raster rendering of replay data (requires matplotlib)."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(11, 5))
    boundary = np.array(plot_data["boundary"] + plot_data["boundary"][:1])
    ax1.plot(boundary[:, 0], boundary[:, 1], "k-", lw=1.5)
    for corners in plot_data["obstacles"]:
        rect = np.array(corners + corners[:1])
        ax1.fill(rect[:, 0], rect[:, 1], color="0.6")
    hits = np.array(plot_data["sensor_hits"])
    if hits.size:
        ax1.plot(hits[:, 0], hits[:, 1], "r.", ms=2)
    path = np.array(plot_data["path"])
    ax1.plot(path[:, 0], path[:, 1], "b-", lw=2)
    ax1.plot(*plot_data["start"][:2], "ko")
    ax1.plot(plot_data["target"][0], plot_data["target"][1], "g*", ms=12)
    ax1.set_aspect("equal")
    ax1.set_title(f"path ({plot_data['termination']})")
    ax2.plot(plot_data["t"], plot_data["speed_normalized"], label="speed")
    ax2.plot(plot_data["t"], plot_data["steer_normalized"], label="steer",
             ls=":")
    ax2.axhline(0.0, color="k", lw=1, ls="--")
    ax2.set_ylim(-1.1, 1.1)
    ax2.set_xlabel("time steps")
    ax2.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def save_attention(path, grid_values: np.ndarray) -> None:
    """Numeric grid export used by the analysis CLI."""
    np.savetxt(path, grid_values, fmt="%.17g", delimiter=",")
