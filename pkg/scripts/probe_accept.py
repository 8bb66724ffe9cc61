"""Dev probe mirroring the acceptance toy-training protocol for one seed."""

import sys
import time

from deeppark import ppo, world as w
from deeppark.controller import GreedyPolicy, evaluate
from deeppark.env import RewardConfig

SEED = int(sys.argv[1]) if len(sys.argv) > 1 else 0
TASK = sys.argv[2] if len(sys.argv) > 2 else "driver"
TARGET = float(sys.argv[3]) if len(sys.argv) > 3 else 80.0
LIMIT = int(sys.argv[4]) if len(sys.argv) > 4 else 150

lot = w.ScenarioConfig(lane_width=(16.0, 24.0), max_turns=0,
                       target_distance=(5.0, 15.0), obstacles=False,
                       bay_fraction=0.0)
tr = ppo.Trainer(task=TASK, seed=SEED,
                 train=ppo.TrainConfig(rollout_steps=4096, minibatch=256,
                                       opt_steps=16),
                 scenario=lot)
t0 = time.time()
best = 0.0
for epoch in range(LIMIT):
    m = tr.train_epoch()
    line = (f"ep {m['epoch']:3d} rew {m['reward_mean']:8.2f} "
            f"succ {m['success_rate']:.2f} coll {m['collision_rate']:.2f} "
            f"time {m['timeout_rate']:.2f} ph {m['phase']}")
    if m["success_rate"] >= 0.35 and (epoch + 1) % 5 == 0:
        rep = evaluate(GreedyPolicy(tr.policy), 200, lot, seed=987,
                       reward_cfg=RewardConfig(task=TASK, phase=2),
                       horizon=tr.cfg.horizon)
        best = max(best, rep.rows[0].success_pct)
        line += f" | heldout {rep.rows[0].success_pct:.1f}%"
        if best >= TARGET:
            print(line, flush=True)
            break
    print(line, flush=True)
print(f"best {best:.1f}% after {tr.epoch} epochs, {time.time()-t0:.0f}s")
