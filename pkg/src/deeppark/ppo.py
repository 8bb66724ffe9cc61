"""Policy training: rollout collection under a frozen snapshot, generalized
advantage estimation, the clipped surrogate and value losses, and the epoch
loop.

Each epoch freezes the policy, simulates episodes until the rollout holds
exactly N transitions (the last episode is truncated at the boundary and
bootstrapped with the critic), estimates advantages, and performs K Adam
steps on minibatches of M samples.  Episodes are seeded individually from
(run seed, epoch, episode index), so a rollout's content does not depend on
how many workers collected it.
"""

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import env as envm
from . import nets
from . import world as w
from .dynamics import Action, VehicleGeometry
from .env import Episode, RewardConfig, Termination, advance_phase
from .kernels import discounted_scan
from .nets import Adam, PolicyNet, ValueNet, gaussian_log_density, log_density_grads

ADV_NORM_EPS = 1e-8

# seed-stream salts: episodes, minibatch draws, network init
EPISODE_SALT = 1
BATCH_SALT = 2
INIT_SALT = 3


class DivergenceDetected(RuntimeError):
    """A network parameter went non-finite during optimization."""


@dataclass(frozen=True)
class TrainConfig:
    rollout_steps: int = 16384     # N
    minibatch: int = 1024          # M
    opt_steps: int = 16            # K
    horizon: int = 250             # T
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip: float = 0.1
    value_scale: float = 0.1
    lr: float = 5e-5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-5
    max_epochs: int = 350
    # Off by default: the raw advantage scale (tens, from the goal bonus)
    # is what keeps trunk-gradient magnitudes above the published Adam
    # epsilon of 1e-5; per-minibatch normalization shrinks them to where
    # epsilon damps the updates and learning stalls at the published
    # learning rate.
    normalize_advantages: bool = False
    checkpoint_every: int = 10
    phase_threshold: float = 0.7
    phase_window: int = 20
    stall_epsilon: float = 0.005   # relative moving-average improvement
    stall_patience: int = 3

    def __post_init__(self):
        if not (0.0 < self.gamma <= 1.0 and 0.0 < self.gae_lambda <= 1.0):
            raise ValueError("gamma and gae_lambda must be in (0, 1]")
        if self.clip <= 0.0:
            raise ValueError("clip parameter must be positive")
        if self.minibatch > self.rollout_steps:
            raise ValueError("minibatch cannot exceed the rollout size")


@dataclass
class EpisodeRecord:
    features: np.ndarray     # (L, 7)
    grids: np.ndarray        # (L, rows, cols) int8
    actions: np.ndarray      # (L, 2) raw Gaussian draws (density bookkeeping)
    log_probs: np.ndarray    # (L,)
    rewards: np.ndarray      # (L,)
    values: np.ndarray       # (L,) critic at the visited states
    final_value: float       # critic at the state after the last step
    termination: Termination
    total_reward: float
    scenario_seed: int


@dataclass
class RolloutSet:
    features: np.ndarray
    grids: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    episode_end: np.ndarray   # uint8, last step of an episode (or boundary)
    terminated: np.ndarray    # uint8, episode truly ended at this step
    bootstrap: np.ndarray     # V(s_{t+1}) where truncated, else 0
    episode_id: np.ndarray
    episodes: list            # completed EpisodeRecords (truncated one excluded)

    def __len__(self):
        return self.rewards.shape[0]


def compute_gae(rollout: RolloutSet, gamma: float, lam: float):
    """Advantages and return targets via the per-episode backward recursion
    adv[t] = delta[t] + gamma*lam*adv[t+1]."""
    n = len(rollout)
    next_values = np.empty(n)
    next_values[:-1] = rollout.values[1:]
    next_values[-1] = 0.0
    ends = rollout.episode_end.astype(bool)
    next_values[ends] = np.where(rollout.terminated[ends].astype(bool),
                                 0.0, rollout.bootstrap[ends])
    deltas = rollout.rewards + gamma * next_values - rollout.values
    adv = discounted_scan(deltas, rollout.episode_end, gamma * lam)
    return adv, adv + rollout.values


def policy_loss_terms(new_log_probs, old_log_probs, advantages, clip):
    """Per-sample clipped-surrogate pieces.

    Returns (objective, ratio, unclipped_mask); the scalar loss is
    -mean(objective), and gradient flows only where the unclipped branch is
    active (ties included, which covers ratios inside the clip band).
    """
    ratio = np.exp(new_log_probs - old_log_probs)
    clipped = np.clip(ratio, 1.0 - clip, 1.0 + clip)
    term_raw = ratio * advantages
    term_clip = clipped * advantages
    objective = np.minimum(term_raw, term_clip)
    return objective, ratio, term_raw <= term_clip


def policy_loss(new_log_probs, old_log_probs, advantages, clip):
    objective, _, _ = policy_loss_terms(new_log_probs, old_log_probs,
                                        advantages, clip)
    return -float(objective.mean())


def value_loss(predicted, returns):
    return float(((predicted - returns) ** 2).mean())


def normalize_advantages(adv):
    return (adv - adv.mean()) / (adv.std() + ADV_NORM_EPS)


class Trainer:
    """Owns the actor, critic, optimizers, phase schedule, and logs."""

    def __init__(self, task: str = envm.DRIVER, seed: int = 0,
                 train: TrainConfig = TrainConfig(),
                 reward: RewardConfig = None,
                 scenario: w.ScenarioConfig = w.ScenarioConfig(),
                 grid: w.GridSpec = w.GridSpec(),
                 geom: VehicleGeometry = VehicleGeometry(),
                 rays: int = 360, max_range: float = 20.0,
                 d_max: float = envm.D_MAX,
                 workers: int = 1, out_dir=None,
                 topology: nets.Topology = None):
        if task == envm.STOPPER:
            scenario = replace(scenario, target_speed=(0.0, 0.0))
        self.task = task
        self.cfg = train
        self.reward_cfg = replace(reward or RewardConfig(), task=task, phase=1)
        self.scenario_cfg = scenario
        self.grid_spec = grid
        self.geom = geom
        self.rays = rays
        self.max_range = max_range
        self.d_max = d_max
        self.workers = max(1, workers)
        self.out_dir = out_dir
        self.seed = seed

        topo = topology or nets.Topology(grid_rows=grid.rows, grid_cols=grid.cols)
        root = np.random.SeedSequence([seed, INIT_SALT])
        init_p, init_v = root.spawn(2)
        self.policy = PolicyNet(np.random.default_rng(init_p), topo)
        self.value = ValueNet(np.random.default_rng(init_v), topo)
        self.adam_policy = Adam(self.policy.params(), train.lr,
                                train.adam_beta1, train.adam_beta2, train.adam_eps)
        self.adam_value = Adam(self.value.params(), train.lr,
                               train.adam_beta1, train.adam_beta2, train.adam_eps)
        self.epoch = 0
        self.phase = 1
        self.success_history = []
        self.reward_history = []
        self.metrics_log = []
        self._stall_count = 0
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)

    # -- seeding ------------------------------------------------------------

    def _episode_streams(self, epoch: int, index: int, salt: int = EPISODE_SALT):
        ss = np.random.SeedSequence([self.seed, salt, epoch, index])
        scen_ss, act_ss = ss.spawn(2)
        scenario_seed = int(scen_ss.generate_state(1, np.uint64)[0] >> 1)
        return scenario_seed, np.random.default_rng(act_ss)

    def make_episode(self, scenario_seed: int, record: bool = False) -> Episode:
        scenario = w.generate_scenario(self.scenario_cfg, scenario_seed, self.geom)
        cfg = replace(self.reward_cfg, phase=self.phase)
        return Episode(scenario, cfg, self.geom, self.grid_spec,
                       self.rays, self.max_range, horizon=self.cfg.horizon,
                       d_max=self.d_max, record=record)

    # -- rollout ------------------------------------------------------------

    def _run_episode(self, epoch: int, index: int, policy: PolicyNet,
                     value: ValueNet) -> EpisodeRecord:
        scenario_seed, act_rng = self._episode_streams(epoch, index)
        episode = self.make_episode(scenario_seed)
        obs = episode.reset()
        feats, grids, actions, logps, rewards = [], [], [], [], []
        while not episode.done:
            out = policy.forward(obs.features[None, :], obs.grid[None, :, :])
            sampled = nets.sample_action(out, act_rng)
            feats.append(obs.features)
            grids.append(obs.grid)
            actions.append(sampled.raw)
            logps.append(sampled.log_density)
            result = episode.step(Action(*sampled.action))
            rewards.append(result.reward)
            obs = result.observation
        feats.append(obs.features)            # successor of the last step
        grids.append(obs.grid)
        fb = np.asarray(feats)
        gb = np.asarray(grids)
        all_values = value.forward(fb, gb)
        return EpisodeRecord(
            features=fb[:-1], grids=gb[:-1],
            actions=np.asarray(actions), log_probs=np.asarray(logps),
            rewards=np.asarray(rewards), values=all_values[:-1],
            final_value=float(all_values[-1]),
            termination=episode.termination,
            total_reward=episode.total_reward,
            scenario_seed=scenario_seed,
        )

    def collect_rollout(self, n_steps: int = None) -> RolloutSet:
        """Simulate episodes (possibly in parallel) until n_steps transitions
        are gathered; the tail episode is truncated at the boundary.  Results
        are identical for any worker count."""
        n_steps = n_steps or self.cfg.rollout_steps
        epoch = self.epoch
        records = []
        total = 0
        next_index = 0
        if self.workers == 1:
            while total < n_steps:
                rec = self._run_episode(epoch, next_index, self.policy, self.value)
                next_index += 1
                records.append(rec)
                total += len(rec.rewards)
        else:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                clones = [(self.policy.clone_shared(), self.value.clone_shared())
                          for _ in range(self.workers)]
                while total < n_steps:
                    futures = [
                        pool.submit(self._run_episode, epoch, next_index + i,
                                    clones[i % len(clones)][0],
                                    clones[i % len(clones)][1])
                        for i in range(self.workers)
                    ]
                    next_index += self.workers
                    for fut in futures:
                        rec = fut.result()
                        if total < n_steps:
                            records.append(rec)
                            total += len(rec.rewards)
        return self._assemble(records, n_steps)

    def _assemble(self, records, n_steps: int) -> RolloutSet:
        rows = self.grid_spec.rows
        cols = self.grid_spec.cols
        features = np.empty((n_steps, 7))
        grids = np.empty((n_steps, rows, cols), dtype=np.int8)
        actions = np.empty((n_steps, 2))
        log_probs = np.empty(n_steps)
        rewards = np.empty(n_steps)
        values = np.empty(n_steps)
        episode_end = np.zeros(n_steps, dtype=np.uint8)
        terminated = np.zeros(n_steps, dtype=np.uint8)
        bootstrap = np.zeros(n_steps)
        episode_id = np.empty(n_steps, dtype=np.int64)
        completed = []
        pos = 0
        for ep_num, rec in enumerate(records):
            length = len(rec.rewards)
            keep = min(length, n_steps - pos)
            sl = slice(pos, pos + keep)
            features[sl] = rec.features[:keep]
            grids[sl] = rec.grids[:keep]
            actions[sl] = rec.actions[:keep]
            log_probs[sl] = rec.log_probs[:keep]
            rewards[sl] = rec.rewards[:keep]
            values[sl] = rec.values[:keep]
            episode_id[sl] = ep_num
            last = pos + keep - 1
            episode_end[last] = 1
            if keep == length:
                terminated[last] = 1
                completed.append(rec)
            else:
                # cut mid-episode: bootstrap with the critic at the next state
                bootstrap[last] = (rec.values[keep] if keep < length
                                   else rec.final_value)
            pos += keep
            if pos >= n_steps:
                break
        assert pos == n_steps
        return RolloutSet(features, grids, actions, log_probs, rewards,
                          values, episode_end, terminated, bootstrap,
                          episode_id, completed)

    # -- optimization -------------------------------------------------------

    def train_epoch(self) -> dict:
        """One full epoch: rollout under the frozen snapshot, GAE, K
        minibatch steps on the combined loss, metrics row, phase update."""
        cfg = self.cfg
        rollout = self.collect_rollout()
        adv, returns = compute_gae(rollout, cfg.gamma, cfg.gae_lambda)

        batch_rng = np.random.default_rng(
            np.random.SeedSequence([self.seed, BATCH_SALT, self.epoch]))
        n = len(rollout)
        pi_losses = []
        v_losses = []
        for _ in range(cfg.opt_steps):
            idx = batch_rng.choice(n, size=cfg.minibatch, replace=False)
            feats = rollout.features[idx]
            grids = rollout.grids[idx]
            acts = rollout.actions[idx]
            adv_b = adv[idx]
            if cfg.normalize_advantages:
                adv_b = normalize_advantages(adv_b)

            out = self.policy.forward(feats, grids)
            new_logp = gaussian_log_density(acts, out.mu, out.sigma)
            objective, ratio, unclipped = policy_loss_terms(
                new_logp, rollout.log_probs[idx], adv_b, cfg.clip)
            pi_losses.append(-float(objective.mean()))
            d_logp = -(adv_b * ratio * unclipped) / cfg.minibatch
            d_mu, d_log_sigma = log_density_grads(acts, out.mu, out.sigma, d_logp)
            self.policy.zero_grads()
            self.policy.backward(d_mu, d_log_sigma)
            self.adam_policy.step(self.policy.params(), self.policy.grads())

            pred = self.value.forward(feats, grids)
            v_losses.append(value_loss(pred, returns[idx]))
            d_v = cfg.value_scale * 2.0 * (pred - returns[idx]) / cfg.minibatch
            self.value.zero_grads()
            self.value.backward(d_v)
            self.adam_value.step(self.value.params(), self.value.grads())

        self._check_finite()
        metrics = self._metrics_row(rollout, pi_losses, v_losses)
        self.metrics_log.append(metrics)
        self.reward_history.append(metrics["reward_mean"])
        self.success_history.append(metrics["success_rate"])
        self.epoch += 1

        new_phase = advance_phase(self.success_history, self.phase,
                                  cfg.phase_threshold, cfg.phase_window)
        if new_phase != self.phase:
            self.phase = new_phase
            self._write_checkpoint("phase_switch")
        return metrics

    def _check_finite(self):
        for net in (self.policy, self.value):
            for name, arr in net.params().items():
                if not np.all(np.isfinite(arr)):
                    self._write_checkpoint("diverged")
                    raise DivergenceDetected(f"non-finite parameter {name}")

    def _metrics_row(self, rollout: RolloutSet, pi_losses, v_losses) -> dict:
        eps = rollout.episodes
        n_eps = max(1, len(eps))
        kinds = [e.termination for e in eps]
        sigma = np.exp(self.policy.log_sigma)
        return {
            "epoch": self.epoch,
            "reward_mean": (sum(e.total_reward for e in eps) / n_eps
                            if eps else 0.0),
            "success_rate": kinds.count(Termination.SUCCESS) / n_eps,
            "collision_rate": kinds.count(Termination.COLLISION) / n_eps,
            "timeout_rate": kinds.count(Termination.TIMEOUT) / n_eps,
            "overspeed_rate": kinds.count(Termination.OVERSPEED) / n_eps,
            "policy_loss": float(np.mean(pi_losses)),
            "value_loss": float(np.mean(v_losses)),
            "sigma_accel": float(sigma[0]),
            "sigma_steer": float(sigma[1]),
            "phase": self.phase,
        }

    # -- outer loop ---------------------------------------------------------

    def should_stop(self) -> bool:
        """Moving-average plateau rule: stop after `stall_patience`
        consecutive epochs whose 20-epoch mean reward improves by less than
        `stall_epsilon` relative."""
        win = self.cfg.phase_window
        hist = self.reward_history
        if len(hist) <= win:
            return False
        ma_now = float(np.mean(hist[-win:]))
        ma_prev = float(np.mean(hist[-win - 1:-1]))
        if ma_now - ma_prev < self.cfg.stall_epsilon * abs(ma_prev):
            self._stall_count += 1
        else:
            self._stall_count = 0
        return self._stall_count >= self.cfg.stall_patience

    def train(self, max_epochs: int = None, callback=None) -> list:
        limit = max_epochs if max_epochs is not None else self.cfg.max_epochs
        while self.epoch < limit:
            metrics = self.train_epoch()
            self._append_log_row(metrics)
            if self.cfg.checkpoint_every and self.out_dir:
                if self.epoch % self.cfg.checkpoint_every == 0:
                    self._write_checkpoint(f"epoch{self.epoch:04d}")
            if callback is not None and callback(self, metrics):
                break
            if self.should_stop():
                break
        if self.out_dir:
            self._write_checkpoint("final")
        return self.metrics_log

    # -- persistence --------------------------------------------------------

    LOG_COLUMNS = ("epoch", "reward_mean", "success_rate", "collision_rate",
                   "timeout_rate", "overspeed_rate", "policy_loss",
                   "value_loss", "sigma_accel", "sigma_steer", "phase")

    @property
    def log_path(self):
        return os.path.join(self.out_dir, "training_log.csv") if self.out_dir else None

    def _append_log_row(self, metrics: dict):
        if not self.out_dir:
            return
        new = not os.path.exists(self.log_path)
        with open(self.log_path, "a") as fh:
            if new:
                fh.write(",".join(self.LOG_COLUMNS) + "\n")
            fh.write(",".join(
                repr(metrics[c]) if isinstance(metrics[c], float) else str(metrics[c])
                for c in self.LOG_COLUMNS) + "\n")

    def _write_checkpoint(self, tag: str):
        if not self.out_dir:
            return None
        path = os.path.join(self.out_dir, f"checkpoint_{tag}.npz")
        nets.save_checkpoint(path, self.policy, self.value,
                             self.adam_policy, self.adam_value,
                             meta={"epoch": self.epoch, "phase": self.phase,
                                   "task": self.task, "seed": self.seed})
        return path
