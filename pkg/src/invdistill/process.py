"""Forward CTMC processes over a token vocabulary.

Two closed-form families are supported: the absorbing process, where every
token decays into a dedicated mask slot, and the uniform process, whose
terminal law is uniform over the vocabulary. Column ``j`` of a rate matrix
holds the outgoing rates of state ``j`` (columns sum to zero), so a
distribution evolves as ``p_t = exp(sigma_bar_t * Q) @ p_0``.

Tokens are 0-based; the mask token of an absorbing process defaults to the
last slot ``N - 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DomainError,
    InvalidMask,
    InvalidRatio,
    InvalidSimplex,
    InvalidVocabulary,
    NumericError,
)

PROCESS_KINDS = ("absorbing", "uniform")
SCHEDULE_KINDS = ("log-linear", "linear-alpha")

SIMPLEX_NEG_TOL = 1e-12
SIMPLEX_SUM_TOL = 1e-9


@dataclass(frozen=True)
class RateMatrix:
    """Base generator ``Q``.

    The closed-form kinds are structural descriptors; ``entries`` is only
    populated for ``kind="dense"``.
    """

    kind: str
    size: int
    mask_index: int | None = None
    entries: np.ndarray | None = field(default=None, compare=False, repr=False)

    def dense(self) -> np.ndarray:
        n = self.size
        if self.kind == "dense":
            return np.array(self.entries, dtype=np.float64)
        if self.kind == "absorbing":
            q = np.zeros((n, n))
            for j in range(n):
                if j == self.mask_index:
                    continue
                q[j, j] = -1.0
                q[self.mask_index, j] = 1.0
            return q
        q = np.ones((n, n))
        np.fill_diagonal(q, 1.0 - n)
        return q

    def entry(self, i: int, j: int) -> float:
        """Rate of jumping from state ``j`` into state ``i``."""
        if self.kind == "dense":
            return float(self.entries[i, j])
        if self.kind == "absorbing":
            if j == self.mask_index:
                return 0.0
            if i == j:
                return -1.0
            return 1.0 if i == self.mask_index else 0.0
        return 1.0 - self.size if i == j else 1.0


def build_rate_matrix(kind: str, n: int, mask_index: int | None = None) -> RateMatrix:
    if kind not in PROCESS_KINDS:
        raise InvalidVocabulary(f"unknown process kind {kind!r}")
    if n < 2:
        raise InvalidVocabulary(f"vocabulary size must be >= 2, got {n}")
    if kind == "absorbing":
        if mask_index is None:
            mask_index = n - 1
        if not 0 <= mask_index < n:
            raise InvalidMask(f"mask index {mask_index} outside [0, {n})")
    elif mask_index is not None:
        raise InvalidMask("uniform process has no mask token")
    return RateMatrix(kind=kind, size=n, mask_index=mask_index)


def dense_rate_matrix(entries) -> RateMatrix:
    q = np.asarray(entries, dtype=np.float64)
    if q.ndim != 2 or q.shape[0] != q.shape[1]:
        raise InvalidVocabulary("dense rate matrix must be square")
    off = q - np.diag(np.diag(q))
    if (off < 0).any():
        raise InvalidVocabulary("off-diagonal rates must be non-negative")
    if np.abs(q.sum(axis=0)).max() > 1e-12:
        raise InvalidVocabulary("rate matrix columns must sum to zero")
    return RateMatrix(kind="dense", size=q.shape[0], entries=q)


def _check_time(t):
    arr = np.asarray(t, dtype=np.float64)
    if np.any(~np.isfinite(arr)) or np.any(arr < 0.0) or np.any(arr > 1.0):
        raise DomainError(f"time must lie in [0, 1], got {t}")
    return arr


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative noise ``sigma_bar_t`` with its analytic derivative.

    ``log-linear`` fixes ``sigma_bar_t = -log(1 - (1 - eps) t)``.
    ``linear-alpha`` divides that by the process rate scale so that the
    keep-probability ``alpha_t`` is linear in ``t`` for either process.
    """

    kind: str = "log-linear"
    eps: float = 1e-3

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise InvalidVocabulary(f"unknown schedule kind {self.kind!r}")
        if not 0.0 <= self.eps < 1.0:
            raise DomainError(f"schedule eps must lie in [0, 1), got {self.eps}")

    def _base(self, t):
        return 1.0 - (1.0 - self.eps) * _check_time(t)

    def sigma_bar(self, t, rate_scale: float = 1.0):
        with np.errstate(divide="ignore"):
            out = -np.log(self._base(t))
        if self.kind == "linear-alpha":
            out = out / rate_scale
        return out

    def sigma(self, t, rate_scale: float = 1.0):
        with np.errstate(divide="ignore"):
            out = (1.0 - self.eps) / self._base(t)
        if self.kind == "linear-alpha":
            out = out / rate_scale
        return out

    def alpha(self, t, rate_scale: float = 1.0):
        base = self._base(t)
        if self.kind == "linear-alpha":
            return base
        return base ** rate_scale

    def alpha_prime(self, t, rate_scale: float = 1.0):
        base = self._base(t)
        if self.kind == "linear-alpha":
            return np.full_like(base, -(1.0 - self.eps))
        return -(1.0 - self.eps) * rate_scale * base ** (rate_scale - 1.0)


def cumulative_sigma(schedule: NoiseSchedule, t, rate_scale: float = 1.0):
    return schedule.sigma_bar(t, rate_scale)


@dataclass(frozen=True)
class DiffusionProcess:
    matrix: RateMatrix
    schedule: NoiseSchedule = NoiseSchedule()

    @property
    def kind(self) -> str:
        return self.matrix.kind

    @property
    def n(self) -> int:
        return self.matrix.size

    @property
    def mask_index(self) -> int | None:
        return self.matrix.mask_index

    @property
    def n_clean(self) -> int:
        """Number of data tokens (the mask slot excluded)."""
        return self.n - 1 if self.kind == "absorbing" else self.n

    @property
    def rate_scale(self) -> float:
        # alpha_t = exp(-scale * sigma_bar_t) is the keep probability
        return 1.0 if self.kind == "absorbing" else float(self.n)

    def sigma_bar(self, t):
        return self.schedule.sigma_bar(t, self.rate_scale)

    def sigma(self, t):
        return self.schedule.sigma(t, self.rate_scale)

    def alpha(self, t):
        return self.schedule.alpha(t, self.rate_scale)

    def alpha_prime(self, t):
        return self.schedule.alpha_prime(t, self.rate_scale)

    def stationary(self) -> np.ndarray:
        if self.kind == "absorbing":
            out = np.zeros(self.n)
            out[self.mask_index] = 1.0
            return out
        return np.full(self.n, 1.0 / self.n)

    def rate_matrix_at(self, t) -> np.ndarray:
        return float(self.sigma(t)) * self.matrix.dense()

    def transition_matrix(self, t) -> np.ndarray:
        """Dense ``exp(sigma_bar_t Q)`` from the closed forms."""
        return transition_from_alpha(self, float(self.alpha(t)))


def make_process(kind: str, n: int, schedule: NoiseSchedule | None = None,
                 mask_index: int | None = None) -> DiffusionProcess:
    return DiffusionProcess(build_rate_matrix(kind, n, mask_index), schedule or NoiseSchedule())


def transition_from_alpha(process: DiffusionProcess, alpha: float) -> np.ndarray:
    n = process.n
    if process.kind == "absorbing":
        m = alpha * np.eye(n)
        m[process.mask_index, :] += 1.0 - alpha
        return m
    return alpha * np.eye(n) + (1.0 - alpha) / n


def as_simplex(x0) -> np.ndarray:
    """Validate rows of ``x0`` as points of the simplex, absorbing float drift."""
    x = np.asarray(x0, dtype=np.float64)
    if np.any(x < -SIMPLEX_NEG_TOL):
        raise InvalidSimplex("simplex entries must be non-negative")
    s = x.sum(axis=-1, keepdims=True)
    if np.any(np.abs(s - 1.0) > SIMPLEX_SUM_TOL):
        raise InvalidSimplex("simplex rows must sum to 1")
    return x / s


def apply_kernel(process: DiffusionProcess, alpha, x0):
    """``exp(sigma_bar Q) x0`` for a given keep probability.

    Works on numpy arrays and on autodiff tensors alike (only linear ops
    are used). ``alpha`` broadcasts against ``x0[..., :1]``.
    """
    total = x0.sum(axis=-1, keepdims=True)
    if process.kind == "absorbing":
        e_m = np.zeros(process.n)
        e_m[process.mask_index] = 1.0
        return x0 * alpha + total * (1.0 - alpha) * e_m
    return x0 * alpha + total * ((1.0 - alpha) / process.n)


def conditional_distribution(process: DiffusionProcess, t, x0) -> np.ndarray:
    x = as_simplex(x0)
    if x.shape[-1] != process.n:
        raise InvalidSimplex(f"expected {process.n} entries, got {x.shape[-1]}")
    alpha = np.asarray(process.alpha(t), dtype=np.float64)
    if alpha.ndim:
        alpha = alpha.reshape(alpha.shape + (1,) * (x.ndim - alpha.ndim))
    return apply_kernel(process, alpha, x)


def sample_categorical(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF draw along the last axis."""
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[:-1] + (1,)) * cdf[..., -1:]
    idx = (u >= cdf).sum(axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)


def sample_xt(process: DiffusionProcess, t, x0, rng: np.random.Generator):
    """Noise token(s) ``x0`` to time ``t``; vectorized over any shape."""
    tokens = np.asarray(x0, dtype=np.int64)
    alpha = np.asarray(process.alpha(t), dtype=np.float64)
    alpha = np.broadcast_to(alpha.reshape(alpha.shape + (1,) * (tokens.ndim - alpha.ndim)),
                            tokens.shape)
    u = rng.random(tokens.shape)
    keep = u < alpha
    if process.kind == "absorbing":
        out = np.where(keep, tokens, process.mask_index)
    else:
        # the uniform kernel is "keep w.p. alpha, else resample uniformly"
        fresh = rng.integers(0, process.n, size=tokens.shape)
        out = np.where(keep, tokens, fresh)
    return out if out.ndim else int(out)


def reverse_rate_entry(process: DiffusionProcess, t, y: int, x: int, ratio: float) -> float:
    """Reverse-time rate ``x -> y`` given ``ratio = p_t(y) / p_t(x)``."""
    if y == x:
        raise ValueError("reverse_rate_entry is defined for y != x")
    if ratio < 0 or not math.isfinite(ratio):
        raise InvalidRatio(f"probability ratio must be finite and >= 0, got {ratio}")
    return ratio * float(process.sigma(t)) * process.matrix.entry(x, y)


def reverse_rate_matrix(process: DiffusionProcess, t, p_t: np.ndarray) -> np.ndarray:
    """Full reverse generator for marginal ``p_t`` (zero-mass states get no inflow)."""
    q = process.rate_matrix_at(t)
    n = process.n
    out = np.zeros((n, n))
    for x in range(n):
        if p_t[x] <= 0:
            continue
        for y in range(n):
            if y != x:
                out[y, x] = p_t[y] / p_t[x] * q[x, y]
        out[x, x] = -out[:, x].sum()
    return out


def dense_matrix_exponential(q, s: float) -> np.ndarray:
    """``exp(s Q)`` by scaling and squaring of a truncated Taylor series."""
    a = np.asarray(q, dtype=np.float64) * float(s)
    if not np.all(np.isfinite(a)):
        raise NumericError("matrix exponential of non-finite input")
    if s < 0:
        raise DomainError("exponent scale must be non-negative")
    n = a.shape[0]
    norm = np.abs(a).sum(axis=0).max()
    squarings = max(0, int(math.ceil(math.log2(norm / 0.25))) if norm > 0.25 else 0)
    a = a / (2.0 ** squarings)
    out = np.eye(n)
    term = np.eye(n)
    for k in range(1, 30):
        term = term @ a / k
        out = out + term
        if np.abs(term).max() < 1e-18:
            break
    for _ in range(squarings):
        out = out @ out
    return out
