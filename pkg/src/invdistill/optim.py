"""AdamW with linear warmup, operating in place on denoiser weights."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class OptimizerConfig:
    lr_fake: float = 1e-4
    lr_student: float = 1e-4
    lr_teacher: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    warmup: int = 100
    ema_decay: float = 0.999

    def __post_init__(self):
        if min(self.lr_fake, self.lr_student, self.lr_teacher) < 0:
            raise ConfigError("learning rates must be non-negative")
        if self.warmup < 0:
            raise ConfigError("warmup must be >= 0")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigError("ema_decay must lie in [0, 1)")

    def to_dict(self):
        return asdict(self)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def warmup_lr(lr: float, warmup: int, step: int) -> float:
    """Linear ramp from 0 over ``warmup`` steps, constant afterwards."""
    if warmup <= 0:
        return lr
    return lr * min(1.0, step / warmup)


def adamw_step(arrays: dict, grads: dict, state: AdamState, lr: float,
               config: OptimizerConfig) -> float:
    """Update ``arrays`` (name -> ndarray) in place; returns the effective rate."""
    lr_t = warmup_lr(lr, config.warmup, state.step)
    state.step += 1
    k = state.step
    c1 = 1.0 - config.beta1 ** k
    c2 = 1.0 - config.beta2 ** k
    for name, p in arrays.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match {name} {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = config.beta1 * m + (1.0 - config.beta1) * g
        v = config.beta2 * v + (1.0 - config.beta2) * g * g
        state.m[name], state.v[name] = m, v
        if config.weight_decay:
            p *= 1.0 - lr_t * config.weight_decay
        p -= lr_t * (m / c1) / (np.sqrt(v / c2) + config.eps)
    return lr_t


def grad_norm(grads: dict) -> float:
    return float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
