"""Episode runner, success/SPL metrics, report tables and trajectory dumps."""
from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .agent import SearchPolicy, load_checkpoint, to_velocity
from .baselines import SGoLAM, OracleFollower, RandomAgent
from .env import SearchEnv, build_episode, episode_recipe
from .oracle import greedy_reference_length, optimal_reference_length
from .training import GT, PRED, EpisodeWorker, policy_step
from .worldgen import GenConfig

log = logging.getLogger(__name__)

TRAIN_SCENES = tuple(range(8))
TEST_SCENES = tuple(range(100, 107))
K_RANGE = tuple(range(1, 7))
TABLE_COLUMNS = ("agent", "k", "success", "spl", "n")
PLOTDATA_VERSION = 1
TABLE_VERSION = 1
AGENTS = ("ours", "map_only", "goal_pred", "sgolam", "random", "oracle")
# deployment knobs for a physical robot: sharper predictions, slower actions, thinner inflation
REAL_WORLD = {"tau": 0.1, "action_scale": 0.55, "inflation_radius": 0.05}


class DegenerateEpisodeError(ValueError):
    """Reference length is zero: the start already satisfies every success radius."""


def spl(success: bool, l_ref: float, p_agent: float) -> float:
    if l_ref <= 0:
        raise DegenerateEpisodeError("reference length must be positive")
    if p_agent < 0:
        raise ValueError("agent path length must be non-negative")
    if not success:
        return 0.0
    return l_ref / max(p_agent, l_ref)


# ---------------------------------------------------------------------------
# agents


class PolicyAgent:
    """A trained network acting on its own predictions."""

    def __init__(self, model: SearchPolicy, deterministic: bool = True, tau: float = 1.0,
                 action_scale: float = 1.0, name: str | None = None, mode: int = PRED):
        self.model = model.eval()
        self.name = name or model.config.variant
        self.deterministic = deterministic
        self.tau = tau
        self.mode = mode  # GT feeds the ground-truth direction instead, as an upper bound
        self.worker = EpisodeWorker(model.config.variant, model.config.layout,
                                    action_scale=action_scale)
        self.generator = torch.Generator().manual_seed(0)
        self._pending = None

    def reset(self, env, seed: int | None = None) -> None:
        self.worker.reset(env.episode, mode=self.mode, env=env)
        self._pending = None
        if seed is not None:
            self.generator.manual_seed(int(seed))

    def act(self, env) -> tuple[float, float]:
        w = self.worker
        if self._pending is not None:
            w.history.observe(env.state)
            if self._pending[0] is not None:
                w.history.push_prediction(self._pending[0])
                w.prev_distance = self._pending[1]
        crops, state, _, _ = w.observe()
        _, _, env_action, _, bins, dist = policy_step(self.model, [crops], [state], self.generator,
                                                      self.deterministic, self.tau)
        self._pending = (None if bins is None else int(bins[0]),
                         None if dist is None else float(dist[0]))
        return to_velocity(env_action[0], w.action_scale)


def make_agent(name: str, checkpoint=None, seed: int = 0, **options):
    if name == "random":
        return RandomAgent(seed)
    if name == "sgolam":
        return SGoLAM(seed, selection=options.get("selection", "random"),
                      inflation_radius=options.get("inflation_radius", 0.2))
    if name == "oracle":
        return OracleFollower()
    if name in ("ours", "map_only", "goal_pred"):
        if checkpoint is None:
            raise ValueError(f"agent {name!r} needs a checkpoint")
        model, _ = load_checkpoint(checkpoint)
        if model.config.variant != name:
            raise ValueError(f"checkpoint holds a {model.config.variant!r} network, not {name!r}")
        return PolicyAgent(model, deterministic=options.get("deterministic", True),
                           tau=options.get("tau", 1.0), action_scale=options.get("action_scale", 1.0))
    raise ValueError(f"unknown agent {name!r}; choose from {', '.join(AGENTS)}")


# ---------------------------------------------------------------------------
# episodes


@dataclass
class EpisodeResult:
    agent: str
    scene: int
    seed: int
    k: int
    success: bool
    path_length: float
    reference_length: float
    spl: float
    steps: int
    collisions: int
    status: str
    find_steps: dict = field(default_factory=dict)
    error: str | None = None


def episode_schedule(scene_seeds, k_range=K_RANGE, episodes_per_scene: int = 75,
                     base_seed: int = 0, gen_config: GenConfig | None = None, **episode_kwargs):
    """Fixed list of episode recipes; k cycles round-robin within each scene."""
    out = []
    for scene in scene_seeds:
        for i in range(episodes_per_scene):
            k = k_range[i % len(k_range)]
            seed = (base_seed * 1_000_003 + int(scene) * 10_007 + i) % (2 ** 31)
            rec = episode_recipe(seed, k, gen_config, floorplan_seed=int(scene), **episode_kwargs)
            rec["scene"] = int(scene)
            out.append(rec)
    return out


def run_episode(agent, recipe: dict, log_path=None, reference: str = "greedy",
                max_steps: int | None = None) -> EpisodeResult:
    """Run one episode; any failure is reported as a failed episode."""
    name = getattr(agent, "name", type(agent).__name__)
    scene = int(recipe.get("scene", recipe.get("kwargs", {}).get("floorplan_seed", recipe["seed"])))
    base = dict(agent=name, scene=scene, seed=recipe["seed"], k=recipe["k"])
    try:
        ep = build_episode({k: v for k, v in recipe.items() if k != "scene"})
        ref_fn = optimal_reference_length if reference == "optimal" else greedy_reference_length
        l_ref = ref_fn(ep)
        env = SearchEnv(ep, {k: v for k, v in recipe.items() if k != "scene"}, log_path=log_path)
        agent.reset(env, seed=recipe["seed"])
        while not env.done:
            env.step(agent.act(env))
            if max_steps is not None and env.state.steps_elapsed >= max_steps:
                break
        env.close()
        success = env.status == "success"
        return EpisodeResult(**base, success=success, path_length=env.sim.path_length,
                             reference_length=l_ref, spl=spl(success, l_ref, env.sim.path_length),
                             steps=env.state.steps_elapsed, collisions=env.state.collisions_total,
                             status=env.status, find_steps=dict(env.sim.find_steps))
    except Exception as exc:  # a broken episode counts as a failure, the sweep goes on
        log.warning("episode %s failed: %r", recipe["seed"], exc)
        return EpisodeResult(**base, success=False, path_length=0.0, reference_length=math.nan,
                             spl=0.0, steps=0, collisions=0, status="error", error=repr(exc))


# ---------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    agent: str
    results: list

    @property
    def rows(self) -> list[dict]:
        ks = sorted({r.k for r in self.results})
        rows = []
        for k in ks:
            sel = [r for r in self.results if r.k == k]
            rows.append({"agent": self.agent, "k": k,
                         "success": float(np.mean([r.success for r in sel])),
                         "spl": float(np.mean([r.spl for r in sel])), "n": len(sel)})
        if rows:
            rows.append({"agent": self.agent, "k": "avg",
                         "success": float(np.mean([r["success"] for r in rows])),
                         "spl": float(np.mean([r["spl"] for r in rows])),
                         "n": sum(r["n"] for r in rows)})
        return rows

    @property
    def seeds(self) -> list[int]:
        return [r.seed for r in self.results]


def _eval_chunk(args):
    name, checkpoint, options, recipes, log_dir = args
    torch.set_num_threads(1)
    agent = make_agent(name, checkpoint, **options)
    out = []
    for rec in recipes:
        lp = None if log_dir is None else Path(log_dir) / f"{name}_{rec['scene']}_{rec['seed']}.jsonl"
        out.append(run_episode(agent, rec, lp, options.get("reference", "greedy")))
    return out


def run_eval(agent_name: str, scene_seeds=TEST_SCENES, k_range=K_RANGE, episodes_per_scene: int = 75,
             checkpoint=None, workers: int | None = None, log_dir=None, base_seed: int = 0,
             agent_options: dict | None = None, **episode_kwargs) -> EvalReport:
    """Evaluate one agent on the fixed schedule; results are in schedule order
    whatever the worker count."""
    recipes = episode_schedule(scene_seeds, k_range, episodes_per_scene, base_seed, **episode_kwargs)
    workers = workers or int(os.environ.get("MOS_WORKERS", "1"))
    options = dict(agent_options or {})
    if log_dir is not None:
        Path(log_dir).mkdir(parents=True, exist_ok=True)
    if workers <= 1:
        results = _eval_chunk((agent_name, checkpoint, options, recipes, log_dir))
    else:
        import multiprocessing as mp
        chunks = [recipes[i::workers] for i in range(workers)]
        with mp.get_context("spawn").Pool(workers) as pool:
            parts = pool.map(_eval_chunk, [(agent_name, checkpoint, options, c, log_dir) for c in chunks])
        results = [None] * len(recipes)
        for i, part in enumerate(parts):
            results[i::workers] = part
    return EvalReport(agent_name, results)


def emit_tables(reports, path) -> None:
    if isinstance(reports, EvalReport):
        reports = [reports]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TABLE_COLUMNS)
        for rep in reports:
            for row in rep.rows:
                writer.writerow([row["agent"], row["k"], f"{row['success']:.4f}", f"{row['spl']:.4f}",
                                 row["n"]])


def read_table(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["k"] = r["k"] if r["k"] == "avg" else int(r["k"])
        r["success"] = float(r["success"])
        r["spl"] = float(r["spl"])
        r["n"] = int(r["n"])
    return rows


def emit_manifest(path, settings: dict) -> str:
    """Sidecar JSON naming the output version and a hash of the settings that produced it."""
    from .agent import config_hash
    blob = {"version": TABLE_VERSION, "config_hash": config_hash(settings), "settings": settings}
    with open(path, "w") as fh:
        json.dump(blob, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return blob["config_hash"]


def emit_episodes(reports, path) -> None:
    """Per-episode results as JSON lines."""
    if isinstance(reports, EvalReport):
        reports = [reports]
    with open(path, "w") as fh:
        for rep in reports:
            for r in rep.results:
                fh.write(json.dumps(asdict(r), sort_keys=True) + "\n")


def emit_plotdata(env: SearchEnv, path) -> None:
    """Trajectory dump: header, poses, actions and the final map snapshot."""
    data = {
        "version": PLOTDATA_VERSION,
        "header": env.header,
        "start_pose": list(env.episode.start_pose),
        "poses": [r["pose"] for r in env.records],
        "actions": [r["action"] for r in env.records],
        "objects": [o.to_dict() for o in env.episode.objects],
        "final_map": env.gmap.dump_snapshot(env.pose, env.state.steps_elapsed),
    }
    with open(path, "w") as fh:
        json.dump(data, fh)


def replay_plotdata(path) -> tuple[SearchEnv, bool]:
    """Rebuild a dumped trajectory from its actions; returns (env, maps_equal)."""
    with open(path) as fh:
        data = json.load(fh)
    if data.get("version") != PLOTDATA_VERSION:
        raise ValueError(f"{path}: unsupported trajectory dump version {data.get('version')!r}")
    recipe = data["header"]["recipe"]
    env = SearchEnv(build_episode(recipe), recipe, data["header"]["inflation_radius"])
    for a in data["actions"]:
        env.step(a)
    return env, env.gmap.dump_snapshot(env.pose, env.state.steps_elapsed) == data["final_map"]
