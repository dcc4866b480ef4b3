"""Observation features and the actor-critic network with a direction head."""
from __future__ import annotations

import hashlib
import json
import math
from collections import deque
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .mapping import COARSE_SIZE, FINE_SIZE, N_CODES, PALETTE
from .oracle import BIN_CENTERS, N_BINS
from .simulator import V_MAX, W_MAX
from .worldgen import N_CLASSES

HISTORY_LEN = 17
POSITION_WINDOW = 32
CHECKPOINT_FORMAT = "mosearch-checkpoint"
CHECKPOINT_VERSION = 1

VARIANTS = ("ours", "map_only", "goal_pred")


class ShapeMismatchError(ValueError):
    pass


class NonFiniteGradientError(FloatingPointError):
    pass


class CheckpointMismatchError(ValueError):
    pass


# ---------------------------------------------------------------------------
# robot state vector


@dataclass(frozen=True)
class StateLayout:
    """Slot layout of the robot state vector for one agent variant.

    ours:      dir(2) hist(34) v1 v2 v3 d1 d2 a_v a_w g(C)
    goal_pred: dir(2) dist(1) hist(34) ...same tail
    map_only:  v1 v2 v3 d1 d2 a_v a_w g(C)
    """

    variant: str = "ours"
    n_classes: int = N_CLASSES

    @property
    def direction_dim(self) -> int:
        return {"ours": 2, "goal_pred": 3, "map_only": 0}[self.variant]

    @property
    def history_dim(self) -> int:
        return 0 if self.variant == "map_only" else 2 * HISTORY_LEN

    @property
    def size(self) -> int:
        return self.direction_dim + self.history_dim + 7 + self.n_classes

    @property
    def direction_slice(self) -> slice:
        return slice(0, self.direction_dim)


@dataclass
class AgentHistory:
    """Per-episode buffers, zero-initialised at episode start."""

    positions: deque = field(default_factory=lambda: deque(maxlen=POSITION_WINDOW))
    predictions: deque = field(default_factory=lambda: deque(maxlen=HISTORY_LEN + 1))
    d1: int = 0
    d2: int = 0
    last_action: tuple[float, float] = (0.0, 0.0)  # normalised to [-1, 1]

    def observe(self, state) -> None:
        self.positions.append((state.x, state.y))
        self.d1 = state.d1
        self.d2 = state.d2
        v, w = state.last_action
        self.last_action = (v / V_MAX, w / W_MAX)

    def push_prediction(self, b: int) -> None:
        self.predictions.append(int(b))

    @property
    def last_prediction(self) -> int | None:
        return self.predictions[-1] if self.predictions else None


def circular_variance(angles) -> float:
    angles = np.asarray(angles, dtype=float)
    if angles.size == 0:
        return 0.0
    r = math.hypot(np.cos(angles).mean(), np.sin(angles).mean())
    return float(min(max(1.0 - r, 0.0), 1.0))


def build_state_vector(history: AgentHistory, direction_bin: int | None, g,
                       layout: StateLayout = StateLayout(),
                       distance: float | None = None) -> np.ndarray:
    """Robot state vector; ``direction_bin`` is the label or previous prediction.

    The prediction history covers predictions t-18..t-2 (the most recent one,
    t-1, is the direction input in prediction mode); v3 is the circular
    variance of the last 17 predictions.  d2 is scaled by 1/16.
    """
    out = np.zeros(layout.size, dtype=np.float32)
    i = 0
    if layout.variant != "map_only":
        if direction_bin is not None:
            a = BIN_CENTERS[direction_bin]
            out[0], out[1] = math.sin(a), math.cos(a)
        i = 2
        if layout.variant == "goal_pred":
            out[2] = 0.0 if distance is None else distance
            i = 3
        past = list(history.predictions)[:-1]
        # newest last; missing (older) slots stay zero
        for j, b in enumerate(past):
            slot = i + 2 * (HISTORY_LEN - len(past) + j)
            a = BIN_CENTERS[b]
            out[slot], out[slot + 1] = math.sin(a), math.cos(a)
        i += 2 * HISTORY_LEN
    if history.positions:
        pos = np.asarray(history.positions)
        v1, v2 = pos[:, 0].var(), pos[:, 1].var()
    else:
        v1 = v2 = 0.0
    recent = list(history.predictions)[-HISTORY_LEN:]
    v3 = circular_variance(BIN_CENTERS[recent]) if recent else 0.0
    out[i:i + 7] = (v1, v2, v3, history.d1, history.d2 / 16.0, *history.last_action)
    out[i + 7:] = np.asarray(g, dtype=np.float32)[:layout.n_classes]
    return out


# ---------------------------------------------------------------------------
# network


@dataclass(frozen=True)
class NetConfig:
    variant: str = "ours"
    n_classes: int = N_CLASSES
    coarse_size: int = COARSE_SIZE
    fine_size: int = FINE_SIZE
    channels: tuple[int, int, int] = (32, 64, 64)
    coarse_features: int = 256
    fine_features: int = 128
    hidden: int = 64
    log_std_init: float = -0.5

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")

    @property
    def layout(self) -> StateLayout:
        return StateLayout(self.variant, self.n_classes)

    @property
    def feature_dim(self) -> int:
        return self.coarse_features + self.fine_features

    def reduced(self, factor: int = 4) -> "NetConfig":
        return replace(self, channels=tuple(max(1, c // factor) for c in self.channels),
                       coarse_features=self.coarse_features // factor,
                       fine_features=self.fine_features // factor)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        d = dict(d)
        d["channels"] = tuple(d["channels"])
        return cls(**d)


class MapEncoder(nn.Module):
    """Three conv stages (kernels 8/4/3, strides 4/2/1) and a linear projection."""

    def __init__(self, size: int, channels, features: int):
        super().__init__()
        c1, c2, c3 = channels
        self.size = size
        self.conv = nn.Sequential(
            nn.Conv2d(3, c1, 8, stride=4), nn.ReLU(),
            nn.Conv2d(c1, c2, 4, stride=2), nn.ReLU(),
            nn.Conv2d(c2, c3, 3, stride=1), nn.ReLU(),
            nn.Flatten(),
        )
        with torch.no_grad():
            n = self.conv(torch.zeros(1, 3, size, size)).shape[1]
        self.linear = nn.Linear(n, features)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.relu(self.linear(self.conv(x)))


def _mlp(n_in: int, hidden: int, n_out: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(n_in, hidden), nn.Tanh(), nn.Linear(hidden, hidden), nn.Tanh(),
                         nn.Linear(hidden, n_out))


class SearchPolicy(nn.Module):
    """Shared map encoders feeding a direction head, a Gaussian actor and a critic."""

    def __init__(self, config: NetConfig = NetConfig()):
        super().__init__()
        self.config = config
        self.layout = config.layout
        self.register_buffer("palette", torch.tensor(PALETTE, dtype=torch.float32) / 255.0,
                             persistent=False)
        self.coarse_encoder = MapEncoder(config.coarse_size, config.channels, config.coarse_features)
        self.fine_encoder = MapEncoder(config.fine_size, config.channels, config.fine_features)
        s = self.layout.size
        f = config.feature_dim
        self.pred_head = None
        if config.variant == "ours":
            self.pred_head = nn.Linear(f + s - self.layout.direction_dim, N_BINS)
        elif config.variant == "goal_pred":
            self.pred_head = nn.Linear(f + s - self.layout.direction_dim, N_BINS + 1)
        self.actor = _mlp(f + s, config.hidden, 2)
        self.critic = _mlp(f + s, config.hidden, 1)
        self.log_std = nn.Parameter(torch.full((2,), config.log_std_init))

    @property
    def has_prediction(self) -> bool:
        return self.pred_head is not None

    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def _image(self, codes: torch.Tensor, size: int) -> torch.Tensor:
        if codes.dim() != 3 or codes.shape[1:] != (size, size):
            raise ShapeMismatchError(f"expected crops of shape (B, {size}, {size}), "
                                     f"got {tuple(codes.shape)}")
        if codes.dtype.is_floating_point:
            raise ShapeMismatchError("crops must hold integer palette codes")
        return F.embedding(codes.long(), self.palette.to(self.log_std.dtype)).permute(0, 3, 1, 2)

    def encode(self, coarse: torch.Tensor, fine: torch.Tensor) -> torch.Tensor:
        """Palette codes -> ``f_t`` = concat(coarse features, fine features)."""
        c = self.coarse_encoder(self._image(coarse, self.config.coarse_size))
        f = self.fine_encoder(self._image(fine, self.config.fine_size))
        return torch.cat([c, f], dim=1)

    def predict(self, f_t: torch.Tensor, state: torch.Tensor, tau: float = 1.0):
        """Direction logits and probabilities; never sees the direction slots."""
        if self.pred_head is None:
            raise RuntimeError("this variant has no prediction head")
        x = torch.cat([f_t, state[:, self.layout.direction_dim:]], dim=1)
        out = self.pred_head(x)
        logits = out[:, :N_BINS]
        probs = torch.softmax(logits / tau, dim=1)
        dist = F.softplus(out[:, N_BINS]) if out.shape[1] > N_BINS else None
        return logits, probs, dist

    def policy(self, f_t: torch.Tensor, state: torch.Tensor):
        x = torch.cat([f_t, state], dim=1)
        mean = self.actor(x)
        value = self.critic(x).squeeze(-1)
        std = self.log_std.exp().expand_as(mean)
        return mean, std, value

    def forward(self, coarse, fine, state, tau: float = 1.0) -> dict:
        f_t = self.encode(coarse, fine)
        out = {"f": f_t}
        if self.has_prediction:
            out["logits"], out["probs"], out["distance"] = self.predict(f_t, state, tau)
        out["mean"], out["std"], out["value"] = self.policy(f_t, state)
        return out


def gaussian_log_prob(action: torch.Tensor, mean: torch.Tensor, std: torch.Tensor) -> torch.Tensor:
    var = std * std
    return (-((action - mean) ** 2) / (2 * var) - torch.log(std) - 0.5 * math.log(2 * math.pi)).sum(-1)


def gaussian_entropy(std: torch.Tensor) -> torch.Tensor:
    return (0.5 + 0.5 * math.log(2 * math.pi) + torch.log(std)).sum(-1)


def act(mean: torch.Tensor, std: torch.Tensor, generator: torch.Generator | None = None,
        deterministic: bool = False):
    """Sample a normalised action; returns (sample, log_prob, env_action in [-1, 1])."""
    if deterministic:
        sample = mean
    else:
        noise = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
        sample = mean + std * noise
    return sample, gaussian_log_prob(sample, mean, std), sample.clamp(-1.0, 1.0)


def to_velocity(norm_action, action_scale: float = 1.0) -> tuple[float, float]:
    a = np.clip(np.asarray(norm_action, dtype=float), -1.0, 1.0)
    return float(a[0] * V_MAX * action_scale), float(a[1] * W_MAX * action_scale)


def backward(loss: torch.Tensor, params) -> None:
    """Backpropagate and refuse non-finite gradients."""
    loss.backward()
    for name, p in params:
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise NonFiniteGradientError(f"non-finite gradient in {name}")


# ---------------------------------------------------------------------------
# checkpoints


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]


def save_checkpoint(path, model: SearchPolicy, extra: dict | None = None) -> None:
    cfg = model.config.to_dict()
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "net_config": cfg,
        "config_hash": config_hash(cfg),
        "params": {k: v.detach().cpu() for k, v in model.state_dict().items()},
        "extra": extra or {},
    }, path)


def load_checkpoint(path, model: SearchPolicy | None = None) -> tuple[SearchPolicy, dict]:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("format") != CHECKPOINT_FORMAT or blob.get("version") != CHECKPOINT_VERSION:
        raise CheckpointMismatchError(f"{path}: not a version-{CHECKPOINT_VERSION} checkpoint")
    if config_hash(blob["net_config"]) != blob["config_hash"]:
        raise CheckpointMismatchError(f"{path}: stored config hash is inconsistent")
    if model is None:
        model = SearchPolicy(NetConfig.from_dict(blob["net_config"]))
    elif config_hash(model.config.to_dict()) != blob["config_hash"]:
        raise CheckpointMismatchError(
            f"{path}: config hash {blob['config_hash']} does not match the model's "
            f"{config_hash(model.config.to_dict())}")
    model.load_state_dict(blob["params"])
    return model, blob["extra"]
