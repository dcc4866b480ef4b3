"""Episode loop: simulator + global map + per-step JSONL log + replay."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .mapping import GlobalMap
from .oracle import AngleLabel, NoReachableTargetError
from .simulator import RUNNING, Simulator, StepResult
from .worldgen import EpisodeSpec, GenConfig, make_episode

LOG_VERSION = 1


def episode_recipe(seed: int, k: int, gen_config: GenConfig | None = None, **kwargs) -> dict:
    """Everything needed to rebuild an episode with :func:`build_episode`."""
    return {"seed": int(seed), "k": int(k),
            "gen_config": asdict(gen_config or GenConfig()), "kwargs": dict(kwargs)}


def build_episode(recipe: dict) -> EpisodeSpec:
    return make_episode(recipe["seed"], recipe["k"], GenConfig(**recipe["gen_config"]),
                        **recipe.get("kwargs", {}))


def episode_fingerprint(ep: EpisodeSpec) -> str:
    h = hashlib.sha256()
    for a in (ep.grid.occupancy, ep.grid.class_id, ep.grid.instance_id, ep.goal_vector):
        h.update(np.ascontiguousarray(a).tobytes())
    h.update(json.dumps([o.to_dict() for o in ep.objects]).encode())
    h.update(json.dumps(list(ep.start_pose)).encode())
    return h.hexdigest()[:16]


class SearchEnv:
    """Runs one episode; the agent sees ``gmap``, ``state`` and ``goal_vector``."""

    def __init__(self, episode: EpisodeSpec, recipe: dict | None = None,
                 inflation_radius: float = 0.2, log_path=None, v_max=None, w_max=None):
        kw = {}
        if v_max is not None:
            kw["v_max"] = v_max
        if w_max is not None:
            kw["w_max"] = w_max
        self.episode = episode
        self.sim = Simulator(episode, inflation_radius=inflation_radius, **kw)
        self.gmap = GlobalMap.like(episode.grid)
        self.gmap.integrate(self.sim.state.pose, self.sim.frame)
        self.records: list[dict] = []
        self.header = {
            "type": "header",
            "version": LOG_VERSION,
            "recipe": recipe,
            "fingerprint": episode_fingerprint(episode),
            "inflation_radius": inflation_radius,
        }
        self._log = None
        if log_path is not None:
            self._log = open(log_path, "w")
            self._log.write(json.dumps(self.header) + "\n")

    @property
    def state(self):
        return self.sim.state

    @property
    def pose(self):
        return self.sim.state.pose

    @property
    def status(self) -> str:
        return self.sim.status

    @property
    def done(self) -> bool:
        return self.sim.status != RUNNING

    @property
    def goal_vector(self) -> np.ndarray:
        return self.episode.goal_vector

    def label(self) -> AngleLabel | None:
        """Ground-truth direction label towards the closest unfound object."""
        if not self.sim.unfound:
            return None
        try:
            lab, _, _ = self.sim.oracle.label(self.pose, self.sim.unfound)
        except NoReachableTargetError:
            return None
        return lab

    def step(self, action) -> StepResult:
        res = self.sim.step(action)
        self.gmap.integrate(self.pose, self.sim.frame)
        for iid in res.newly_found:
            self.gmap.mark_found(iid)
        rec = {
            "t": self.sim.state.steps_elapsed,
            "pose": list(self.pose),
            "action": [float(action[0]), float(action[1])],
            "reward_terms": res.reward_terms,
            "d1": res.d1,
            "newly_found": list(res.newly_found),
            "status": res.status,
            "clamped": res.clamped,
        }
        self.records.append(rec)
        if self._log is not None:
            self._log.write(json.dumps(rec) + "\n")
            if self.done:
                self.close()
        return res

    def close(self) -> None:
        if self._log is not None:
            self._log.close()
            self._log = None


class ReplayMismatch(AssertionError):
    pass


def read_log(path) -> tuple[dict, list[dict]]:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty episode log")
    header = json.loads(lines[0])
    if header.get("type") != "header" or header.get("version") != LOG_VERSION:
        raise ValueError(f"{path}: not a version-{LOG_VERSION} episode log")
    return header, [json.loads(line) for line in lines[1:]]


def replay(path) -> SearchEnv:
    """Re-run a logged episode from its actions and check every record."""
    header, records = read_log(path)
    if header.get("recipe") is None:
        raise ValueError(f"{path}: log has no episode recipe, cannot replay")
    ep = build_episode(header["recipe"])
    if episode_fingerprint(ep) != header["fingerprint"]:
        raise ReplayMismatch("rebuilt episode differs from the logged one")
    env = SearchEnv(ep, header["recipe"], header["inflation_radius"])
    for i, rec in enumerate(records):
        env.step(rec["action"])
        got = json.loads(json.dumps(env.records[-1]))
        if got != rec:
            raise ReplayMismatch(f"step {i + 1}: logged {rec} but replay gave {got}")
    return env
