"""Command line: gen, run, train, eval, experiment, replay."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__


def _out_dir(arg) -> Path:
    path = Path(arg or os.environ.get("MOS_OUTPUT_DIR", "mos_output"))
    path.mkdir(parents=True, exist_ok=True)
    return path


def _ints(text: str) -> list[int]:
    """'1-6' or '1,3,5' or '100-106'."""
    out = []
    for part in text.split(","):
        if "-" in part.strip("-"):
            a, b = part.split("-", 1)
            out.extend(range(int(a), int(b) + 1))
        elif part:
            out.append(int(part))
    return out


def cmd_gen(args) -> int:
    from .worldgen import GenConfig, make_episode, save_floorplan
    out = _out_dir(args.out)
    cfg = GenConfig(n_rooms=args.rooms)
    for seed in _ints(args.seeds):
        ep = make_episode(seed, args.k, cfg, floorplan_seed=seed)
        path = out / f"floorplan_{seed}.json"
        save_floorplan(ep.grid, path, ep.objects)
        print(f"{path}  {ep.grid.width}x{ep.grid.height} cells, k={ep.k}")
    return 0


def cmd_run(args) -> int:
    from .env import episode_recipe
    from .evaluation import emit_plotdata, make_agent, run_episode
    out = _out_dir(args.out)
    recipe = episode_recipe(args.episode_seed, args.k, floorplan_seed=args.scene)
    recipe["scene"] = args.scene
    agent = make_agent(args.agent, args.checkpoint, seed=args.episode_seed, **_agent_options(args))
    log_path = out / f"{args.agent}_{args.scene}_{args.episode_seed}.jsonl"
    res = run_episode(agent, recipe, log_path)
    print(json.dumps({k: v for k, v in res.__dict__.items()}, default=str))
    if args.plotdata:
        from .env import replay
        env = replay(log_path)
        emit_plotdata(env, out / f"{args.agent}_{args.scene}_{args.episode_seed}.plot.json")
    return 0 if res.error is None else 1


def _agent_options(args) -> dict:
    opts = {}
    if getattr(args, "real_world", False):
        from .evaluation import REAL_WORLD
        opts.update(REAL_WORLD)
    for key in ("tau", "action_scale", "selection", "inflation_radius"):
        val = getattr(args, key, None)
        if val is not None:
            opts[key] = val
    if getattr(args, "stochastic", False):
        opts["deterministic"] = False
    return opts


def cmd_train(args) -> int:
    import torch
    from .training import Trainer, load_train_config, save_train_config
    torch.set_num_threads(1)
    cfg = load_train_config(args.config)
    out = _out_dir(args.out)
    save_train_config(cfg, out / "config.ini")
    trainer = Trainer(cfg, out)
    trainer.train(args.steps)
    trainer.save(out / "final.pt")
    print(f"trained {trainer.steps} steps, {trainer.episodes} episodes -> {out / 'final.pt'}")
    return 0


def cmd_eval(args) -> int:
    from .evaluation import emit_episodes, emit_manifest, emit_tables, run_eval
    out = _out_dir(args.out)
    ckpts = dict(c.split("=", 1) for c in args.checkpoint or [])
    settings = {"agents": args.agents, "scenes": _ints(args.scenes), "k": _ints(args.k),
                "episodes": args.episodes, "seed": args.seed, "options": _agent_options(args),
                "checkpoints": ckpts}
    reports = []
    for name in args.agents.split(","):
        rep = run_eval(name, _ints(args.scenes), tuple(_ints(args.k)), args.episodes,
                       checkpoint=ckpts.get(name), workers=args.workers, base_seed=args.seed,
                       agent_options=_agent_options(args),
                       log_dir=out / "logs" if args.logs else None)
        reports.append(rep)
    emit_tables(reports, out / "results.csv")
    emit_episodes(reports, out / "episodes.jsonl")
    emit_manifest(out / "results.meta.json", settings)
    print((out / "results.csv").read_text(), end="")
    return 0


def cmd_experiment(args) -> int:
    from .experiments import micro_world_experiment
    out = _out_dir(args.out)
    res = micro_world_experiment(out, seed=args.seed, max_steps=args.max_steps,
                                 log=lambda msg: print(msg, flush=True))
    print(json.dumps({k: res[k] for k in ("steps", "ours", "map_only", "random", "seconds")}))
    return 0


def cmd_replay(args) -> int:
    from .env import ReplayMismatch, replay
    try:
        env = replay(args.log)
    except ReplayMismatch as exc:
        print(f"replay mismatch: {exc}", file=sys.stderr)
        return 1
    print(f"replayed {len(env.records)} steps, status {env.status}")
    if args.snapshot:
        Path(args.snapshot).write_text(env.gmap.dump_snapshot(env.pose, env.state.steps_elapsed))
    return 0


def build_parser() -> argparse.ArgumentParser:
    from .evaluation import AGENTS
    p = argparse.ArgumentParser(prog="mosearch", description="multi-object search at desk scale")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate floorplans")
    g.add_argument("--seeds", default="0-7")
    g.add_argument("--rooms", type=int, default=6)
    g.add_argument("--k", type=int, default=1)
    g.add_argument("--out")
    g.set_defaults(func=cmd_gen)

    def agent_flags(q):
        q.add_argument("--checkpoint", help="network checkpoint for learned agents")
        q.add_argument("--tau", type=float, help="softmax temperature of the direction head")
        q.add_argument("--action-scale", type=float)
        q.add_argument("--selection", choices=("random", "nearest"), help="SGoLAM frontier choice")
        q.add_argument("--stochastic", action="store_true", help="sample actions instead of the mean")
        q.add_argument("--inflation-radius", type=float, help="SGoLAM obstacle inflation (m)")
        q.add_argument("--real-world", action="store_true",
                       help="deployment preset: tau 0.1, action scale 0.55, 5 cm inflation")

    r = sub.add_parser("run", help="run one episode and write its log")
    r.add_argument("--agent", choices=AGENTS, required=True)
    r.add_argument("--episode-seed", type=int, required=True)
    r.add_argument("--scene", type=int, default=100)
    r.add_argument("--k", type=int, default=1)
    r.add_argument("--plotdata", action="store_true")
    r.add_argument("--out")
    agent_flags(r)
    r.set_defaults(func=cmd_run)

    t = sub.add_parser("train", help="train a network from an INI config")
    t.add_argument("--config", required=True)
    t.add_argument("--steps", type=int)
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate agents and write results.csv")
    e.add_argument("--agents", default="sgolam,random")
    e.add_argument("--scenes", default="100-106")
    e.add_argument("--k", default="1-6")
    e.add_argument("--episodes", type=int, default=25, help="episodes per scene")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--workers", type=int)
    e.add_argument("--logs", action="store_true", help="keep per-episode JSONL logs")
    e.add_argument("--out")
    agent_flags(e)
    e.set_defaults(checkpoint=None)
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("experiment", help="micro-world learning run: ours vs map-only vs random")
    x.add_argument("--seed", type=int, default=0)
    x.add_argument("--max-steps", type=int, default=300_000)
    x.add_argument("--out")
    x.set_defaults(func=cmd_experiment)

    rp = sub.add_parser("replay", help="re-run a logged episode and verify it")
    rp.add_argument("--log", required=True)
    rp.add_argument("--snapshot", help="write the final map snapshot here")
    rp.set_defaults(func=cmd_replay)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
