"""AdamW with decoupled weight decay and the warmup + cosine learning-rate schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# parameter roles that are never decayed
NO_DECAY_ROLES = frozenset({"bias", "gain", "queries", "mask_token"})


class NonFiniteGradientError(FloatingPointError):
    pass


def decays(name: str) -> bool:
    return name.rsplit(".", 1)[-1] not in NO_DECAY_ROLES


@dataclass
class AdamWState:
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: dict, grads: dict, state: AdamWState, lr: float) -> None:
    """One in-place AdamW update of ``params`` (name -> Tensor).

    Missing gradients count as zero. All gradients are validated before any
    parameter is touched, so an aborted step leaves the state unchanged.
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for {name!r} at optimizer step {state.step + 1}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if state.weight_decay and decays(name):
            p.data *= 1.0 - lr * state.weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass(frozen=True)
class ScheduleConfig:
    base_lr: float = 1e-3
    warmup_epochs: int = 10
    total_epochs: int = 250
    min_lr: float = 1e-6

    def __post_init__(self):
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ValueError("need 0 <= warmup_epochs < total_epochs")
        if self.base_lr < 0 or self.min_lr < 0:
            raise ValueError("learning rates must be non-negative")


def lr_at(step: int, steps_per_epoch: int, cfg: ScheduleConfig) -> float:
    """Linear warmup from 0, then cosine from ``base_lr`` down to ``min_lr`` at the last step."""
    if step < 0:
        raise ValueError("step must be >= 0")
    warm = cfg.warmup_epochs * steps_per_epoch
    last = cfg.total_epochs * steps_per_epoch - 1
    if step < warm:
        return cfg.base_lr * step / warm
    span = max(last - warm, 1)
    progress = min((step - warm) / span, 1.0)
    return cfg.min_lr + 0.5 * (cfg.base_lr - cfg.min_lr) * (1.0 + math.cos(math.pi * progress))
