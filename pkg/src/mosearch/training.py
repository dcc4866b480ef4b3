"""PPO with the auxiliary direction loss and the ground-truth/prediction curriculum."""
from __future__ import annotations

import configparser
import copy
import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .agent import (AgentHistory, NetConfig, SearchPolicy, act, backward, build_state_vector,
                    gaussian_entropy, gaussian_log_prob, save_checkpoint, to_velocity)
from .env import SearchEnv, build_episode, episode_recipe
from .mapping import extract_ego
from .oracle import N_BINS, AngleLabel, angle_bin, wrap_angle
from .worldgen import GenConfig

log = logging.getLogger(__name__)

CONFIG_VERSION = 1
GT, PRED = 0, 1


class WorkerError(RuntimeError):
    """A simulator failure inside one rollout worker."""

    def __init__(self, worker: int, exc: BaseException):
        super().__init__(f"rollout worker {worker}: {exc!r}")
        self.worker = worker


@dataclass
class PPOConfig:
    clip: float = 0.1
    ppo_epochs: int = 4
    minibatches: int = 64
    value_coef: float = 0.5
    entropy_coef: float = 0.005
    gamma: float = 0.99
    lr: float = 1e-4
    max_grad_norm: float = 0.5
    gae_lambda: float = 0.95
    pred_coef: float = 1.0
    adam_eps: float = 1e-5
    stop_pred_gradient: bool = False

    def validate(self) -> None:
        if not 0 < self.clip < 1:
            raise ValueError("clip must lie in (0, 1)")
        for name in ("ppo_epochs", "minibatches", "gamma", "lr", "max_grad_norm", "gae_lambda"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.pred_coef < 0 or self.value_coef < 0 or self.entropy_coef < 0:
            raise ValueError("loss coefficients must be non-negative")


# ---------------------------------------------------------------------------
# curriculum


@dataclass
class CurriculumState:
    """Probability of running a whole episode on the agent's own predictions.

    Percentages are kept as integers so the schedule is exact.
    """

    start_pct: int = 16
    step_pct: int = 2
    every: int = 4
    cap_pct: int = 72
    unlock_threshold: float = 0.5
    unlocked: bool = False
    episodes_since_unlock: int = 0

    @property
    def p_pred(self) -> float:
        if not self.unlocked:
            return self.start_pct / 100
        n = self.episodes_since_unlock // self.every
        return min(self.cap_pct, self.start_pct + self.step_pct * n) / 100


def curriculum_sample(state: CurriculumState, rng: np.random.Generator) -> int:
    return PRED if rng.random() < state.p_pred else GT


def curriculum_update(state: CurriculumState, success_ema: float) -> CurriculumState:
    """Call once per completed episode with the updated success EMA."""
    if state.unlocked:
        state.episodes_since_unlock += 1
    elif success_ema > state.unlock_threshold:
        state.unlocked = True
    return state


class SuccessEMA:
    """Exponential moving average with a span of ``window`` episodes."""

    def __init__(self, window: int = 100):
        self.alpha = 2.0 / (window + 1)
        self.value = 0.0

    def update(self, success: bool) -> float:
        self.value += self.alpha * (float(success) - self.value)
        return self.value


# ---------------------------------------------------------------------------
# losses


def prediction_loss(probs: torch.Tensor, onehot: torch.Tensor, eps: float = 0.0) -> torch.Tensor:
    """Mean cross-entropy ``-(1/N) sum_i onehot_i . log p_i`` (with 0 log 0 = 0)."""
    return -torch.special.xlogy(onehot, probs + eps).sum(-1).mean()


def prediction_loss_from_logits(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    # same quantity as prediction_loss, computed stably
    return F.cross_entropy(logits, labels)


def clipped_surrogate(ratio: torch.Tensor, adv: torch.Tensor, clip: float) -> torch.Tensor:
    """Per-sample PPO objective ``min(r A, clip(r, 1-e, 1+e) A)`` (to be maximised)."""
    return torch.min(ratio * adv, ratio.clamp(1.0 - clip, 1.0 + clip) * adv)


def goal_prediction_loss(logits: torch.Tensor, distance: torch.Tensor, true_bin: torch.Tensor,
                         true_distance: torch.Tensor, delta: float = 1.0) -> torch.Tensor:
    """Cross-entropy on the angle bin plus Huber on the distance."""
    return F.cross_entropy(logits, true_bin) + F.huber_loss(distance, true_distance, delta=delta)


def compute_gae(rewards, values, dones, last_values, gamma: float, lam: float):
    """Generalised advantage estimates for arrays shaped (T, E).

    ``dones[t]`` marks that the episode ended after step ``t``.
    """
    T = rewards.shape[0]
    adv = np.zeros_like(rewards, dtype=np.float64)
    gae = np.zeros(rewards.shape[1:], dtype=np.float64)
    for t in range(T - 1, -1, -1):
        nxt = last_values if t == T - 1 else values[t + 1]
        nonterminal = 1.0 - dones[t]
        delta = rewards[t] + gamma * nxt * nonterminal - values[t]
        gae = delta + gamma * lam * nonterminal * gae
        adv[t] = gae
    return adv, adv + values


# ---------------------------------------------------------------------------
# rollout storage


class RolloutBuffer:
    def __init__(self, horizon: int, n_envs: int, state_dim: int, coarse: int, fine: int):
        T, E = horizon, n_envs
        self.horizon, self.n_envs = T, E
        self.coarse = np.zeros((T, E, coarse, coarse), dtype=np.uint8)
        self.fine = np.zeros((T, E, fine, fine), dtype=np.uint8)
        self.state = np.zeros((T, E, state_dim), dtype=np.float32)
        self.action = np.zeros((T, E, 2), dtype=np.float32)
        self.log_prob = np.zeros((T, E), dtype=np.float32)
        self.reward = np.zeros((T, E), dtype=np.float64)
        self.value = np.zeros((T, E), dtype=np.float64)
        self.done = np.zeros((T, E), dtype=np.float64)
        self.label = np.full((T, E), -1, dtype=np.int64)
        self.label_distance = np.zeros((T, E), dtype=np.float32)
        self.mode = np.zeros((T, E), dtype=np.int64)
        self.advantages = None
        self.returns = None
        self.t = 0

    @property
    def full(self) -> bool:
        return self.t >= self.horizon

    def finalize(self, last_values, gamma: float, lam: float) -> None:
        adv, ret = compute_gae(self.reward, self.value, self.done, last_values, gamma, lam)
        self.returns = ret
        self.advantages = (adv - adv.mean()) / (adv.std() + 1e-8)

    def flat(self) -> dict:
        """Worker-contiguous flattening: worker e owns rows e*T .. (e+1)*T - 1."""
        def f(a):
            a = np.swapaxes(a, 0, 1)
            return a.reshape(-1, *a.shape[2:])
        out = {k: f(getattr(self, k)) for k in
               ("coarse", "fine", "state", "action", "log_prob", "value", "label",
                "label_distance", "mode")}
        out["advantages"] = f(self.advantages)
        out["returns"] = f(self.returns)
        return out


# ---------------------------------------------------------------------------
# episode workers


@dataclass
class WorldConfig:
    n_rooms: int = 6
    room_min: float = 2.0
    room_max: float = 6.0
    corridor_prob: float = 0.35
    scene_seeds: tuple = tuple(range(8))
    k_min: int = 1
    k_max: int = 6
    step_cap: int = 3500
    collision_cap: int = 600
    min_start_distance: float = 2.0
    inflation_radius: float = 0.2

    def gen_config(self) -> GenConfig:
        return GenConfig(n_rooms=self.n_rooms, room_min=self.room_min, room_max=self.room_max,
                         corridor_prob=self.corridor_prob)

    def recipe(self, seed: int, rng: np.random.Generator) -> dict:
        k = int(rng.integers(self.k_min, self.k_max + 1))
        kw = {"step_cap": self.step_cap, "collision_cap": self.collision_cap,
              "min_start_distance": self.min_start_distance,
              "inflation_radius": self.inflation_radius}
        if self.scene_seeds:
            kw["floorplan_seed"] = int(self.scene_seeds[int(rng.integers(len(self.scene_seeds)))])
        return episode_recipe(seed, k, self.gen_config(), **kw)


def goal_label(env: SearchEnv) -> tuple[int, float]:
    """Angle bin and straight-line distance to the closest unfound object centre."""
    x, y, th = env.pose
    iid, _ = env.sim.oracle.closest(x, y, env.sim.unfound)
    ox, oy = env.sim.oracle.objects[iid].center
    return angle_bin(wrap_angle(math.atan2(oy - y, ox - x) - th)), math.hypot(ox - x, oy - y)


class EpisodeWorker:
    """Owns one environment and the agent-side history for it."""

    def __init__(self, variant: str, layout, inflation_radius: float = 0.2,
                 action_scale: float = 1.0):
        self.variant = variant
        self.layout = layout
        self.inflation_radius = inflation_radius
        self.action_scale = action_scale
        self.env: SearchEnv | None = None

    def reset(self, episode, recipe=None, mode: int = GT, env: SearchEnv | None = None) -> None:
        self.env = env if env is not None else SearchEnv(episode, recipe, self.inflation_radius)
        self.history = AgentHistory()
        self.history.observe(self.env.state)
        self.mode = mode
        self.prev_distance = None
        self.episode_return = 0.0

    def label(self) -> tuple[int, float]:
        if self.variant == "goal_pred":
            return goal_label(self.env)
        lab = self.env.label()
        return (-1 if lab is None else lab.bin), 0.0

    def observe(self):
        """Crops, state vector and the oracle label for the current step."""
        lab_bin, lab_dist = self.label()
        prev = self.history.last_prediction
        direction, dist = None, None
        if self.variant != "map_only":
            if self.mode == GT and lab_bin >= 0:
                direction, dist = lab_bin, lab_dist
            elif self.mode == PRED:
                direction, dist = prev, self.prev_distance
        # the overlay always shows the previous prediction: drawing the label
        # there would leak it into the encoder that feeds the prediction head
        crops = extract_ego(self.env.gmap, self.env.pose,
                            prev if self.variant != "map_only" else None)
        state = build_state_vector(self.history, direction, self.env.goal_vector, self.layout, dist)
        return crops, state, lab_bin, lab_dist

    def step(self, norm_action, pred_bin: int | None, pred_distance: float | None):
        res = self.env.step(to_velocity(norm_action, self.action_scale))
        self.history.observe(self.env.state)
        if pred_bin is not None:
            self.history.push_prediction(pred_bin)
            self.prev_distance = pred_distance
        self.episode_return += res.reward
        return res


def _batch_tensors(crops, states):
    coarse = torch.from_numpy(np.stack([c.coarse for c in crops]))
    fine = torch.from_numpy(np.stack([c.fine for c in crops]))
    return coarse, fine, torch.from_numpy(np.stack(states))


@torch.no_grad()
def policy_step(model: SearchPolicy, crops, states, generator=None, deterministic=False,
                tau: float = 1.0):
    coarse, fine, state = _batch_tensors(crops, states)
    out = model(coarse, fine, state, tau)
    sample, logp, env_action = act(out["mean"], out["std"], generator, deterministic)
    pred_bins = out["probs"].argmax(1).numpy() if model.has_prediction else None
    pred_dist = out["distance"].numpy() if out.get("distance") is not None else None
    return sample.numpy(), logp.numpy(), env_action.numpy(), out["value"].numpy(), pred_bins, pred_dist


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    ppo: PPOConfig = field(default_factory=PPOConfig)
    net: NetConfig = field(default_factory=NetConfig)
    world: WorldConfig = field(default_factory=WorldConfig)
    seed: int = 0
    n_envs: int = 8
    horizon: int = 2048
    total_steps: int = 4_500_000
    curriculum: bool = True
    checkpoint_every: int = 10
    success_window: int = 100


class Trainer:
    """Collects rollouts from ``n_envs`` workers in lockstep and runs PPO updates."""

    def __init__(self, config: TrainConfig, out_dir=None):
        self.cfg = config
        config.ppo.validate()
        torch.manual_seed(config.seed)
        self.rng = np.random.default_rng([config.seed, 0x7A1])
        self.torch_gen = torch.Generator().manual_seed(config.seed)
        self.model = SearchPolicy(config.net)
        if config.net.variant == "map_only":
            config.ppo.pred_coef = 0.0
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=config.ppo.lr,
                                          eps=config.ppo.adam_eps)
        self.curriculum = CurriculumState()
        self.success = SuccessEMA(config.success_window)
        self.workers = [EpisodeWorker(config.net.variant, config.net.layout,
                                      config.world.inflation_radius) for _ in range(config.n_envs)]
        self.steps = 0
        self.updates = 0
        self.episodes = 0
        self.episode_log: list[dict] = []
        self.out_dir = Path(out_dir) if out_dir else None
        self._metrics_file = None
        if self.out_dir:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        self._episode_counter = 0
        for w in self.workers:
            self._reset_worker(w)

    def _next_mode(self) -> int:
        if self.cfg.net.variant == "map_only":
            return GT
        if not self.cfg.curriculum:
            return PRED
        return curriculum_sample(self.curriculum, self.rng)

    def _reset_worker(self, w: EpisodeWorker) -> None:
        seed = int(self.cfg.seed) * 10_000_000 + self._episode_counter
        self._episode_counter += 1
        recipe = self.cfg.world.recipe(seed, self.rng)
        w.reset(build_episode(recipe), recipe, self._next_mode())

    def collect_rollouts(self) -> RolloutBuffer:
        cfg = self.cfg
        net = cfg.net
        buf = RolloutBuffer(cfg.horizon, cfg.n_envs, net.layout.size, net.coarse_size, net.fine_size)
        self.model.eval()
        for t in range(cfg.horizon):
            obs = [self._guard(e, w.observe) for e, w in enumerate(self.workers)]
            crops = [o[0] for o in obs]
            states = [o[1] for o in obs]
            sample, logp, env_action, value, pred_bins, pred_dist = policy_step(
                self.model, crops, states, self.torch_gen)
            for e, w in enumerate(self.workers):
                buf.coarse[t, e] = crops[e].coarse
                buf.fine[t, e] = crops[e].fine
                buf.state[t, e] = states[e]
                buf.label[t, e] = obs[e][2]
                buf.label_distance[t, e] = obs[e][3]
                buf.mode[t, e] = w.mode
                res = self._guard(e, w.step, env_action[e],
                                  None if pred_bins is None else int(pred_bins[e]),
                                  None if pred_dist is None else float(pred_dist[e]))
                buf.reward[t, e] = res.reward
                buf.done[t, e] = float(w.env.done)
                if w.env.done:
                    self._guard(e, self._finish_episode, w)
            buf.action[t] = sample
            buf.log_prob[t] = logp
            buf.value[t] = value
            buf.t = t + 1
            self.steps += cfg.n_envs
        obs = [self._guard(e, w.observe) for e, w in enumerate(self.workers)]
        _, _, _, last_values, _, _ = policy_step(self.model, [o[0] for o in obs],
                                                 [o[1] for o in obs], self.torch_gen)
        buf.finalize(last_values, cfg.ppo.gamma, cfg.ppo.gae_lambda)
        return buf

    @staticmethod
    def _guard(worker: int, fn, *args):
        try:
            return fn(*args)
        except WorkerError:
            raise
        except Exception as exc:
            raise WorkerError(worker, exc) from exc

    def _finish_episode(self, w: EpisodeWorker) -> None:
        success = w.env.status == "success"
        ema = self.success.update(success)
        if self.cfg.curriculum and self.cfg.net.variant != "map_only":
            curriculum_update(self.curriculum, ema)
        self.episodes += 1
        self.episode_log.append({"return": w.episode_return, "success": success,
                                 "mode": w.mode, "steps": w.env.state.steps_elapsed})
        self._reset_worker(w)

    def update(self, buf: RolloutBuffer) -> dict:
        stats = ppo_update(self.model, self.optimizer, buf, self.cfg.ppo, self.rng)
        self.updates += 1
        return stats

    def train(self, total_steps: int | None = None, callback=None) -> list[dict]:
        total = total_steps or self.cfg.total_steps
        history = []
        while self.steps < total:
            t0 = time.time()
            n_before = len(self.episode_log)
            buf = self.collect_rollouts()
            stats = self.update(buf)
            recent = self.episode_log[n_before:]
            row = {
                "step": self.steps,
                "mean_return": float(np.mean([e["return"] for e in recent])) if recent else float("nan"),
                "success_EMA": self.success.value,
                "p_pred": self.curriculum.p_pred,
                **{k: stats[k] for k in ("L_clip", "L_value", "L_pred", "entropy", "grad_norm")},
            }
            history.append(row)
            self._write_metrics(row)
            log.info("update %d step %d return %.3f succ_ema %.3f p_pred %.2f L_pred %.3f (%.1fs)",
                     self.updates, self.steps, row["mean_return"], row["success_EMA"],
                     row["p_pred"], row["L_pred"], time.time() - t0)
            if self.out_dir and self.updates % self.cfg.checkpoint_every == 0:
                self.save(self.out_dir / f"checkpoint_{self.steps:09d}.pt")
            if callback is not None and callback(self, row):
                break
        return history

    def _write_metrics(self, row: dict) -> None:
        if not self.out_dir:
            return
        path = self.out_dir / "metrics.csv"
        new = not path.exists() or self._metrics_file is None
        with open(path, "w" if new else "a", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(row))
            if new:
                writer.writeheader()
            writer.writerow(row)
        self._metrics_file = path

    def save(self, path) -> None:
        save_checkpoint(path, self.model, {"steps": self.steps, "config": config_to_dict(self.cfg)})


def ppo_update(model: SearchPolicy, optimizer, buf: RolloutBuffer, cfg: PPOConfig,
               rng: np.random.Generator) -> dict:
    """Clipped PPO plus the weighted direction loss over several epochs.

    A non-finite loss or gradient restores the parameters and optimiser
    state from before the update and re-raises.
    """
    data = buf.flat()
    n = len(data["advantages"])
    mb = max(n // cfg.minibatches, 1)
    snapshot = (copy.deepcopy(model.state_dict()), copy.deepcopy(optimizer.state_dict()))
    sums = {"L_clip": 0.0, "L_value": 0.0, "L_pred": 0.0, "entropy": 0.0, "grad_norm": 0.0,
            "clip_fraction": 0.0}
    grad_norms = []
    count = 0
    model.train()
    t = {k: torch.from_numpy(np.ascontiguousarray(v)) for k, v in data.items()}
    try:
        for _ in range(cfg.ppo_epochs):
            perm = rng.permutation(n)
            for start in range(0, mb * cfg.minibatches, mb):
                idx = torch.from_numpy(perm[start:start + mb])
                losses = minibatch_loss(model, {k: v[idx] for k, v in t.items()}, cfg)
                optimizer.zero_grad()
                if not torch.isfinite(losses["total"]):
                    raise FloatingPointError("non-finite loss")
                backward(losses["total"], model.named_parameters())
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.max_grad_norm)
                gn = float(torch.sqrt(sum((p.grad ** 2).sum() for p in model.parameters()
                                          if p.grad is not None)))
                grad_norms.append(gn)
                optimizer.step()
                for k in ("L_clip", "L_value", "L_pred", "entropy", "clip_fraction"):
                    sums[k] += float(losses[k])
                count += 1
    except FloatingPointError:
        model.load_state_dict(snapshot[0])
        optimizer.load_state_dict(snapshot[1])
        raise
    out = {k: v / max(count, 1) for k, v in sums.items()}
    out["grad_norm"] = max(grad_norms) if grad_norms else 0.0
    out["grad_norms"] = grad_norms
    return out


def minibatch_loss(model: SearchPolicy, b: dict, cfg: PPOConfig) -> dict:
    f_t = model.encode(b["coarse"], b["fine"])
    state = b["state"]
    mean, std, value = model.policy(f_t, state)
    logp = gaussian_log_prob(b["action"].to(mean.dtype), mean, std)
    ratio = torch.exp(logp - b["log_prob"].to(mean.dtype))
    adv = b["advantages"].to(mean.dtype)
    l_clip = -clipped_surrogate(ratio, adv, cfg.clip).mean()
    l_value = F.mse_loss(value, b["returns"].to(mean.dtype))
    entropy = gaussian_entropy(std).mean()
    l_pred = torch.zeros((), dtype=mean.dtype)
    if model.has_prediction and cfg.pred_coef > 0:
        f_pred = f_t
        if cfg.stop_pred_gradient:
            on_pred = (b["mode"] == PRED).unsqueeze(1)
            f_pred = torch.where(on_pred, f_t.detach(), f_t)
        logits, _, dist = model.predict(f_pred, state)
        valid = b["label"] >= 0
        if valid.any():
            if dist is not None:
                l_pred = goal_prediction_loss(logits[valid], dist[valid], b["label"][valid],
                                              b["label_distance"][valid].to(dist.dtype))
            else:
                l_pred = prediction_loss_from_logits(logits[valid], b["label"][valid])
    total = l_clip + cfg.value_coef * l_value - cfg.entropy_coef * entropy + cfg.pred_coef * l_pred
    with torch.no_grad():
        clip_frac = ((ratio - 1).abs() > cfg.clip).float().mean()
    return {"total": total, "L_clip": l_clip.detach(), "L_value": l_value.detach(),
            "L_pred": l_pred.detach(), "entropy": entropy.detach(), "clip_fraction": clip_frac}


# ---------------------------------------------------------------------------
# config files


def config_to_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["net"]["channels"] = list(cfg.net.channels)
    d["world"]["scene_seeds"] = list(cfg.world.scene_seeds)
    return d


def _parse(value: str, like):
    if isinstance(like, bool):
        if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"expected a boolean, got {value!r}")
        return value.lower() in ("true", "1", "yes")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    if isinstance(like, tuple):
        return tuple(int(v) for v in value.replace(",", " ").split())
    return value


def load_train_config(path) -> TrainConfig:
    """INI file with a ``[meta] version`` and sections run/ppo/net/world."""
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise FileNotFoundError(path)
    version = cp.getint("meta", "version", fallback=None)
    if version != CONFIG_VERSION:
        raise ValueError(f"{path}: config version {version!r}, expected {CONFIG_VERSION}")
    base = TrainConfig()
    sections = {"ppo": base.ppo, "net": base.net, "world": base.world}
    updates = {}
    for name, obj in sections.items():
        if not cp.has_section(name):
            continue
        known = {f.name: getattr(obj, f.name) for f in fields(obj)}
        vals = {}
        for key, raw in cp.items(name):
            if key not in known:
                raise ValueError(f"{path}: unknown key '{key}' in [{name}]")
            vals[key] = _parse(raw, known[key])
        updates[name] = replace(obj, **vals)
    run = {}
    if cp.has_section("run"):
        for key, raw in cp.items("run"):
            if key not in ("seed", "n_envs", "horizon", "total_steps", "curriculum",
                           "checkpoint_every", "success_window"):
                raise ValueError(f"{path}: unknown key '{key}' in [run]")
            run[key] = _parse(raw, getattr(base, key))
    return replace(base, **updates, **run)


def save_train_config(cfg: TrainConfig, path) -> None:
    cp = configparser.ConfigParser()
    cp["meta"] = {"version": str(CONFIG_VERSION)}
    d = config_to_dict(cfg)
    for name in ("ppo", "net", "world"):
        cp[name] = {k: (" ".join(map(str, v)) if isinstance(v, list) else str(v))
                    for k, v in d[name].items()}
    cp["run"] = {k: str(d[k]) for k in ("seed", "n_envs", "horizon", "total_steps", "curriculum",
                                        "checkpoint_every", "success_window")}
    with open(path, "w") as fh:
        cp.write(fh)
