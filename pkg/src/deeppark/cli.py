"""Command-line entry point.

Subcommands: train, evaluate, replay, attention, gen-scenarios.
Exit codes: 0 ok, 2 config error, 3 training divergence, 4 I/O failure.
"""

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_IO = 4


def _parser():
    p = argparse.ArgumentParser(
        prog="deeppark",
        description="Deep-RL parking-lot controller: train, evaluate, analyze.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run the training loop")
    t.add_argument("--config", help="JSON run config (defaults otherwise)")
    t.add_argument("--seed", type=int)
    t.add_argument("--workers", type=int)
    t.add_argument("--epochs", type=int, help="override max epochs")
    t.add_argument("--out", help="output directory")

    e = sub.add_parser("evaluate", help="batch-evaluate checkpoints")
    e.add_argument("checkpoints", nargs="+",
                   help="policy checkpoint file(s); with --controller, "
                        "exactly two: driver then stopper")
    e.add_argument("--config", help="JSON run config for the task set")
    e.add_argument("--tasks", type=int, help="number of evaluation tasks")
    e.add_argument("--seed", type=int)
    e.add_argument("--workers", type=int)
    e.add_argument("--out", help="report file (CSV)")
    e.add_argument("--controller", action="store_true",
                   help="combine two checkpoints into one controller")

    r = sub.add_parser("replay", help="export plot data for a trace")
    r.add_argument("--trace", required=True)
    r.add_argument("--scenario", required=True)
    r.add_argument("--out", required=True, help="plot-data JSON path")
    r.add_argument("--png", help="also render a PNG here")

    a = sub.add_parser("attention", help="export an attention map")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--scenario", required=True)
    a.add_argument("--out", required=True, help="attention grid CSV path")

    g = sub.add_parser("gen-scenarios", help="write scenario files")
    g.add_argument("--config", help="JSON run config")
    g.add_argument("--count", type=int, default=8)
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True, help="output directory")
    return p


def _load_config(args):
    from .config import RunConfig, apply_overrides, load_config
    cfg = load_config(args.config) if args.config else RunConfig()
    return apply_overrides(
        cfg,
        seed=getattr(args, "seed", None),
        workers=getattr(args, "workers", None),
        out=getattr(args, "out", None),
        epochs=getattr(args, "epochs", None),
    )


def cmd_train(args) -> int:
    from .config import make_trainer
    from .ppo import DivergenceDetected
    cfg = _load_config(args)
    trainer = make_trainer(cfg)
    try:
        trainer.train()
    except DivergenceDetected as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    print(f"trained {trainer.epoch} epochs (phase {trainer.phase}); "
          f"logs in {cfg.out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .controller import DeepController, GreedyPolicy, evaluate
    from .env import RewardConfig
    from .nets import load_checkpoint
    cfg = _load_config(args)
    tasks = args.tasks if args.tasks is not None else cfg.eval_tasks
    if args.controller:
        if len(args.checkpoints) != 2:
            print("--controller needs exactly two checkpoints "
                  "(driver, stopper)", file=sys.stderr)
            return EXIT_CONFIG
        agents = {"controller": DeepController.from_checkpoints(*args.checkpoints)}
    else:
        agents = {}
        for path in args.checkpoints:
            name = os.path.splitext(os.path.basename(path))[0]
            policy, _, _, _, _ = load_checkpoint(path)
            agents[name] = GreedyPolicy(policy, name)
    report = evaluate(
        agents, tasks, cfg.scenario, seed=cfg.seed,
        reward_cfg=dataclasses.replace(cfg.reward, phase=2),
        grid=cfg.grid, rays=cfg.rays, max_range=cfg.max_range,
        horizon=cfg.train.horizon, workers=cfg.workers,
    )
    print(report.to_table())
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(report.to_csv())
        print(f"report written to {args.out}")
    return EXIT_OK


def cmd_replay(args) -> int:
    from .controller import TraceCorrupt, render_replay_png, replay
    from .world import load_scenario
    scenario = load_scenario(args.scenario)
    try:
        data = replay(args.trace, scenario)
    except TraceCorrupt as exc:
        print(f"bad trace: {exc}", file=sys.stderr)
        return EXIT_IO
    with open(args.out, "w") as fh:
        json.dump(data, fh)
    if args.png:
        render_replay_png(data, args.png)
    print(f"replay data written to {args.out}")
    return EXIT_OK


def cmd_attention(args) -> int:
    from .controller import attention_map, save_attention
    from .env import observe
    from .nets import load_checkpoint
    from .world import GridSpec, load_scenario
    policy, _, _, _, _ = load_checkpoint(args.checkpoint)
    scenario = load_scenario(args.scenario)
    spec = GridSpec(rows=policy.topo.grid_rows, cols=policy.topo.grid_cols)
    obs = observe(scenario.start, scenario, spec)
    grid = attention_map(policy, obs)
    save_attention(args.out, grid)
    base, ext = os.path.splitext(args.out)
    save_attention(f"{base}.input{ext or '.csv'}", obs.grid)
    print(f"attention map written to {args.out}")
    return EXIT_OK


def cmd_gen_scenarios(args) -> int:
    from .world import generate_scenario, save_scenario
    cfg = _load_config(args)
    os.makedirs(args.out, exist_ok=True)
    for i in range(args.count):
        seed = int(np.random.SeedSequence([cfg.seed, i]).generate_state(
            1, np.uint64)[0] >> 1)
        scenario = generate_scenario(cfg.scenario, seed)
        save_scenario(scenario, os.path.join(args.out, f"scenario_{i:04d}.json"))
    print(f"wrote {args.count} scenarios to {args.out}")
    return EXIT_OK


_COMMANDS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "replay": cmd_replay,
    "attention": cmd_attention,
    "gen-scenarios": cmd_gen_scenarios,
}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    from .config import ConfigInvalid
    try:
        return _COMMANDS[args.command](args)
    except ConfigInvalid as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


def console_main():
    sys.exit(main())


if __name__ == "__main__":
    console_main()
