"""Desk-scale learning experiment on a two-room, one-object micro-world."""
from __future__ import annotations

import json
import logging
import time
from pathlib import Path

import numpy as np
import torch

from .agent import NetConfig
from .baselines import RandomAgent
from .evaluation import PolicyAgent, episode_schedule, run_episode
from .training import PPOConfig, TrainConfig, Trainer, WorldConfig

log = logging.getLogger(__name__)

MICRO_WORLD = WorldConfig(n_rooms=2, k_min=1, k_max=1, step_cap=500, collision_cap=200)


def micro_world_config(variant: str = "ours", seed: int = 0) -> TrainConfig:
    """Small encoders, short rollouts and many small minibatches so that a
    single CPU core gets enough optimiser steps within a few hundred thousand
    environment steps."""
    return TrainConfig(
        ppo=PPOConfig(lr=3e-4, ppo_epochs=2, minibatches=32),
        net=NetConfig(variant=variant).reduced(4),
        world=MICRO_WORLD,
        seed=seed,
        n_envs=8,
        horizon=128,
        total_steps=300_000,
    )


def micro_world_episodes(n_per_scene: int, base_seed: int) -> list[dict]:
    w = MICRO_WORLD
    return episode_schedule(w.scene_seeds, (1,), n_per_scene, base_seed, w.gen_config(),
                            step_cap=w.step_cap, collision_cap=w.collision_cap)


def success_rate(agent, recipes) -> float:
    return float(np.mean([run_episode(agent, r).success for r in recipes]))


def _train(variant, seed, max_steps, probe, eval_every, stop_at, out_dir, say):
    torch.set_num_threads(1)
    trainer = Trainer(micro_world_config(variant, seed), out_dir)
    curve = []
    next_eval = eval_every

    def callback(tr, row):
        nonlocal next_eval
        if tr.steps < next_eval:
            return False
        next_eval += eval_every
        rate = success_rate(PolicyAgent(tr.model), probe)
        tr.model.train()
        curve.append((tr.steps, rate))
        say(f"{variant}: {tr.steps} steps, probe success {rate:.2f}, train EMA {row['success_EMA']:.2f}, "
            f"p_pred {row['p_pred']:.2f}")
        return stop_at is not None and rate >= stop_at

    trainer.train(max_steps, callback)
    if out_dir:
        trainer.save(Path(out_dir) / "final.pt")
    return trainer, curve


def micro_world_experiment(out_dir=None, seed: int = 0, max_steps: int = 300_000,
                           eval_every: int = 20_480, target: float = 0.8, log=log.info) -> dict:
    """Train ours until it reaches ``target`` on a probe set (or ``max_steps``),
    train map-only for the same number of steps, then score both and a random
    agent on a fresh confirmation set."""
    t0 = time.time()
    out = Path(out_dir) if out_dir else None
    probe = micro_world_episodes(3, base_seed=77)
    confirm = micro_world_episodes(6, base_seed=4242)
    ours, ours_curve = _train("ours", seed, max_steps, probe, eval_every, target,
                              out / "ours" if out else None, log)
    steps = ours.steps
    mo, mo_curve = _train("map_only", seed, steps, probe, eval_every, None,
                          out / "map_only" if out else None, log)
    res = {
        "steps": steps,
        "map_only_steps": mo.steps,
        "ours": success_rate(PolicyAgent(ours.model), confirm),
        "map_only": success_rate(PolicyAgent(mo.model), confirm),
        "random": success_rate(RandomAgent(seed), confirm),
        "ours_curve": ours_curve,
        "map_only_curve": mo_curve,
        "episodes": len(confirm),
    }
    res["seconds"] = time.time() - t0
    log(f"confirmation set ({len(confirm)} episodes): ours {res['ours']:.2f}, "
        f"map-only {res['map_only']:.2f}, random {res['random']:.2f}, {res['seconds'] / 60:.1f} min")
    if out:
        (out / "experiment.json").write_text(json.dumps(res, indent=1))
    return res
