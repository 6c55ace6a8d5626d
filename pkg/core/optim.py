"""AdamW with decoupled weight decay, global-norm clipping and the WSD schedule."""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, MutableMapping, Tuple

import numpy as np

from core.errors import ConfigurationError, DimensionError, NumericError

logger = logging.getLogger(__name__)

# Pretraining defaults
MAX_LR = 5e-4
WEIGHT_DECAY = 0.1
CLIP_NORM = 1.0
BETA1 = 0.9
BETA2 = 0.95
EPS = 1e-8


@dataclass
class WsdSchedule:
    """Warmup-Stable-Decay: linear warmup to max_lr, plateau until stable_end, linear decay to the floor."""
    warmup_steps: int
    stable_end: int
    decay_steps: int
    max_lr: float = MAX_LR
    floor_fraction: float = 0.1

    def validate(self) -> None:
        if not 0 < self.warmup_steps <= self.stable_end:
            raise ConfigurationError(
                f"need 0 < warmup_steps <= stable_end, got W={self.warmup_steps}, S={self.stable_end}"
            )
        if self.decay_steps <= 0:
            raise ConfigurationError(f"decay_steps must be > 0, got {self.decay_steps}")
        if not 0 <= self.floor_fraction < 1:
            raise ConfigurationError(f"floor_fraction must lie in [0, 1), got {self.floor_fraction}")
        if self.max_lr <= 0:
            raise ConfigurationError(f"max_lr must be > 0, got {self.max_lr}")

    @property
    def total_steps(self) -> int:
        return self.stable_end + self.decay_steps


def wsd_lr(step: int, sch: WsdSchedule) -> float:
    sch.validate()
    if step < 0:
        raise ConfigurationError(f"step must be >= 0, got {step}")
    eta, floor = sch.max_lr, sch.floor_fraction
    if step < sch.warmup_steps:
        return eta * (floor + (1.0 - floor) * step / sch.warmup_steps)
    if step <= sch.stable_end:
        return eta
    if step < sch.stable_end + sch.decay_steps:
        return eta * (1.0 - (1.0 - floor) * (step - sch.stable_end) / sch.decay_steps)
    return eta * floor


def dump_schedule(sch: WsdSchedule, total_steps: int) -> List[Tuple[int, float]]:
    """(step, lr) rows for steps 0..total_steps inclusive."""
    sch.validate()
    return [(s, wsd_lr(s, sch)) for s in range(total_steps + 1)]


def clip_grad_norm(grads: MutableMapping[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients in place so their global L2 norm is at most ``max_norm``; returns the scale."""
    if max_norm <= 0:
        raise ConfigurationError(f"max_norm must be > 0, got {max_norm}")
    sq = 0.0
    for name, g in grads.items():
        s = float(np.sum(np.square(g, dtype=np.float64)))
        if not math.isfinite(s):
            raise NumericError(f"non-finite gradient in parameter '{name}'")
        sq += s
    norm = math.sqrt(sq)
    if norm <= max_norm:
        return 1.0
    scale = max_norm / norm
    for g in grads.values():
        g *= g.dtype.type(scale)
    return scale


@dataclass
class AdamWState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adamw_step(params: MutableMapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
               state: AdamWState, lr: float, beta1: float = BETA1, beta2: float = BETA2,
               eps: float = EPS, weight_decay: float = WEIGHT_DECAY) -> None:
    """One decoupled-decay Adam update, in place on ``params`` and ``state``."""
    if not (0 <= beta1 < 1 and 0 <= beta2 < 1 and eps > 0 and weight_decay >= 0 and lr >= 0):
        raise ConfigurationError(
            f"invalid AdamW hyperparameters lr={lr} betas=({beta1}, {beta2}) eps={eps} wd={weight_decay}"
        )
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise DimensionError(f"gradient for '{name}' has shape {g.shape}, parameter {theta.shape}")
        m = state.m.setdefault(name, np.zeros_like(theta))
        v = state.v.setdefault(name, np.zeros_like(theta))
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * np.square(g)
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        theta -= (lr * weight_decay) * theta + lr * update


@dataclass
class AdamW:
    """Holds hyperparameters and state; the harness calls ``step`` once per optimizer step."""
    beta1: float = BETA1
    beta2: float = BETA2
    eps: float = EPS
    weight_decay: float = WEIGHT_DECAY
    state: AdamWState = field(default_factory=AdamWState)

    def step(self, params: MutableMapping[str, np.ndarray], grads: Mapping[str, np.ndarray], lr: float) -> None:
        adamw_step(params, grads, self.state, lr, self.beta1, self.beta2, self.eps, self.weight_decay)

    def hyperparameters(self) -> Dict[str, float]:
        return {"beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "weight_decay": self.weight_decay}
