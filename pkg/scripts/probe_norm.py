"""Dev probe: toy training with configurable crash penalty."""

import sys
import time

from deeppark import ppo, world as w
from deeppark.controller import GreedyPolicy, evaluate
from deeppark.env import RewardConfig

SEED = int(sys.argv[1]) if len(sys.argv) > 1 else 1
TASK = sys.argv[2] if len(sys.argv) > 2 else "driver"
EPOCHS = int(sys.argv[3]) if len(sys.argv) > 3 else 60
PEN = float(sys.argv[4]) if len(sys.argv) > 4 else 0.0

toy = w.ScenarioConfig(lane_width=(16.0, 24.0), max_turns=0,
                       target_distance=(5.0, 15.0), obstacles=False,
                       bay_fraction=0.0)
LR = float(sys.argv[5]) if len(sys.argv) > 5 else 5e-5
NORM = (sys.argv[6] != "off") if len(sys.argv) > 6 else True
cfg = ppo.TrainConfig(rollout_steps=4096, minibatch=256, opt_steps=16, lr=LR, normalize_advantages=NORM)
tr = ppo.Trainer(task=TASK, seed=SEED, train=cfg,
                 reward=RewardConfig(crash_penalty=PEN), scenario=toy)

t0 = time.time()
for epoch in range(EPOCHS):
    te = time.time()
    m = tr.train_epoch()
    line = (f"ep {m['epoch']:3d} rew {m['reward_mean']:8.2f} "
            f"succ {m['success_rate']:.2f} coll {m['collision_rate']:.2f} "
            f"time {m['timeout_rate']:.2f} over {m['overspeed_rate']:.2f} "
            f"sig {m['sigma_accel']:.3f}/{m['sigma_steer']:.3f} "
            f"ph {m['phase']} [{time.time()-te:.1f}s]")
    if (epoch + 1) % 5 == 0:
        rep = evaluate(GreedyPolicy(tr.policy), 100, toy, seed=99,
                       reward_cfg=RewardConfig(crash_penalty=PEN, phase=2),
                       horizon=cfg.horizon)
        line += f" | heldout {rep.rows[0].success_pct:.0f}%"
    print(line, flush=True)
print(f"total {time.time()-t0:.0f}s")
