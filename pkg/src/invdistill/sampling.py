"""Reverse-time generation on a uniform time grid ``t_k = 1 - k / steps``."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ScheduleOrderError
from .process import DiffusionProcess, sample_categorical

SAMPLER_KINDS = ("euler-score", "ancestral-absorbing", "ancestral-uniform", "greedy-tail")
EULER_CLIP = 1.0 - 1e-6


@dataclass(frozen=True)
class SamplerConfig:
    kind: str
    steps: int
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SAMPLER_KINDS:
            raise ConfigError(f"unknown sampler {self.kind!r}")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")

    def grid(self) -> np.ndarray:
        return 1.0 - np.arange(self.steps + 1) / self.steps


def model_kind(model) -> str:
    """``'score'`` or ``'x0'`` for a denoiser or oracle callable."""
    kind = getattr(model, "parameterization", None)
    if kind is None:
        raise ConfigError("model does not declare a parameterization")
    return "score" if kind == "score" else "x0"


def _values(out):
    return np.asarray(getattr(out, "data", out), dtype=np.float64)


def clean_rows(x0_hat, process: DiffusionProcess) -> np.ndarray:
    """Drop the mask column (absorbing) and renormalize."""
    x0_hat = _values(x0_hat)
    if process.kind == "absorbing":
        keep = [i for i in range(process.n) if i != process.mask_index]
        x0_hat = x0_hat[..., keep]
    return x0_hat / x0_hat.sum(axis=-1, keepdims=True)


def greedy_rows(rows: np.ndarray) -> np.ndarray:
    return np.eye(rows.shape[-1])[np.argmax(rows, axis=-1)]


def _check_order(alpha_t, alpha_s):
    if alpha_s < alpha_t:
        raise ScheduleOrderError(f"need alpha_s >= alpha_t, got {alpha_s} < {alpha_t}")


def ancestral_probs_absorbing(rows, x_t, alpha_t, alpha_s, mask_index):
    """Next-token law per position; ``rows`` are clean-token distributions."""
    _check_order(alpha_t, alpha_s)
    x_t = np.asarray(x_t)
    n = rows.shape[-1] + 1
    stay = (1.0 - alpha_s) / (1.0 - alpha_t) if alpha_t < 1.0 else 0.0
    out = np.zeros(x_t.shape + (n,))
    keep = [i for i in range(n) if i != mask_index]
    out[..., keep] = (1.0 - stay) * rows
    out[..., mask_index] = stay
    visible = x_t != mask_index
    out[visible] = np.eye(n)[x_t[visible]]
    return out


def ancestral_probs_uniform(rows, x_t, alpha_t, alpha_s, n):
    """``q(x_s | x_t, x0_hat)`` proportional to ``p(x_t | x_s) p(x_s | x0_hat)``."""
    _check_order(alpha_t, alpha_s)
    if alpha_s <= 0:
        raise ScheduleOrderError("alpha_s must be positive")
    x_t = np.asarray(x_t)
    a_ts = alpha_t / alpha_s
    lik = a_ts * np.eye(n)[x_t] + (1.0 - a_ts) / n
    prior = alpha_s * rows + (1.0 - alpha_s) / n
    q = lik * prior
    return q / q.sum(axis=-1, keepdims=True)


def _times(t, count):
    return np.full(count, float(t))


def euler_step_score(model, x_t, t, dt, process: DiffusionProcess, rng):
    """One Euler step of the reverse CTMC. Returns ``(tokens, clipped_positions)``."""
    if dt <= 0:
        raise ConfigError("dt must be positive")
    x_t = np.asarray(x_t)
    score = _values(model(x_t, _times(t, x_t.shape[0])))
    q = process.matrix.dense()
    np.fill_diagonal(q, 0.0)
    rates = float(process.sigma(t)) * q[x_t] * score
    jump = dt * rates
    off = jump.sum(axis=-1, keepdims=True)
    clipped = off[..., 0] > EULER_CLIP
    jump = np.where(off > EULER_CLIP, jump * (EULER_CLIP / np.where(off > 0, off, 1.0)), jump)
    probs = jump.copy()
    stay = 1.0 - jump.sum(axis=-1)
    np.put_along_axis(probs, x_t[..., None], stay[..., None], axis=-1)
    return sample_categorical(probs, rng), int(clipped.sum())


def _x0_rows(model, x_t, t, process):
    return clean_rows(model(x_t, _times(t, x_t.shape[0])), process)


def ancestral_step_absorbing(model, x_t, t, s, process: DiffusionProcess, rng):
    if s == t:
        return np.array(x_t, copy=True)
    at, as_ = float(process.alpha(t)), float(process.alpha(s))
    rows = _x0_rows(model, x_t, t, process)
    probs = ancestral_probs_absorbing(rows, x_t, at, as_, process.mask_index)
    return sample_categorical(probs, rng)


def ancestral_step_uniform(model, x_t, t, s, process: DiffusionProcess, rng, greedy=False):
    if s == t:
        return np.array(x_t, copy=True)
    at, as_ = float(process.alpha(t)), float(process.alpha(s))
    rows = _x0_rows(model, x_t, t, process)
    if greedy:
        rows = greedy_rows(rows)
    probs = ancestral_probs_uniform(rows, x_t, at, as_, process.n)
    return sample_categorical(probs, rng)


def greedy_tail_step(model, x_t, t, s, process: DiffusionProcess, rng):
    """Ancestral uniform step with the denoiser replaced by its argmax."""
    return ancestral_step_uniform(model, x_t, t, s, process, rng, greedy=True)


def check_sampler(kind: str, model, process: DiffusionProcess):
    mk = model_kind(model)
    if kind == "euler-score" and mk != "score":
        raise ConfigError("euler-score sampling needs a score model")
    if kind != "euler-score" and mk != "x0":
        raise ConfigError(f"{kind} sampling needs an x0 model")
    if kind == "ancestral-absorbing" and process.kind != "absorbing":
        raise ConfigError("ancestral-absorbing needs the absorbing process")
    if kind in ("ancestral-uniform", "greedy-tail") and process.kind != "uniform":
        raise ConfigError(f"{kind} needs the uniform process")


def generate(model, process: DiffusionProcess, config: SamplerConfig, count: int,
             length: int, rng: np.random.Generator | None = None):
    """Run the sampler from the terminal law. Returns ``(sequences, stats)``."""
    check_sampler(config.kind, model, process)
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    if count == 0:
        return np.zeros((0, length), dtype=np.int64), {"clip_rate": 0.0}
    if process.kind == "absorbing":
        x = np.full((count, length), process.mask_index, dtype=np.int64)
    else:
        x = rng.integers(0, process.n, size=(count, length))
    grid = config.grid()
    clipped = 0
    for t, s in zip(grid[:-1], grid[1:]):
        if config.kind == "euler-score":
            x, c = euler_step_score(model, x, t, t - s, process, rng)
            clipped += c
        elif config.kind == "ancestral-absorbing":
            x = ancestral_step_absorbing(model, x, t, s, process, rng)
        elif config.kind == "ancestral-uniform":
            x = ancestral_step_uniform(model, x, t, s, process, rng)
        else:
            x = greedy_tail_step(model, x, t, s, process, rng)
    if config.kind == "euler-score" and process.kind == "absorbing":
        # positions still masked at t = 0 are revealed by the denoised argmax of the score
        still = x == process.mask_index
        if np.any(still):
            score = _values(model(x, _times(0.0, count)))
            score[..., process.mask_index] = -np.inf
            x = np.where(still, np.argmax(score, axis=-1), x)
    stats = {"clip_rate": clipped / float(count * length * config.steps)}
    return np.asarray(x, dtype=np.int64), stats


def student_generate(student, process: DiffusionProcess, config: SamplerConfig, count: int,
                     length: int, rng: np.random.Generator | None = None):
    """Few-step generation with a distilled student (same control flow as the teacher)."""
    return generate(student, process, config, count, length, rng)
