"""Per-token diffusion integrands and their sequence-level estimators.

All integrands are vectorized over leading axes: ``x_t`` has shape ``S``,
``x0`` / model outputs have shape ``S + (N,)`` and ``t`` broadcasts against
``S``. Inputs may be numpy arrays or autodiff tensors; if any input is a
tensor the result is a tensor, otherwise a plain array.

Weighting conventions:

* SEDD uses ``lambda_{x_t, y} = sigma_t * Q[x_t, y]`` (the forward rate from
  ``y`` into ``x_t``).
* MDLM uses ``w_t = -alpha_t' / (1 - alpha_t)`` on masked positions.
* UDLM / Duo use the same ``sigma_t * Q`` weights as SEDD, which for the
  uniform process equals ``-alpha_t' / (N alpha_t)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DomainError, UnreachableState
from .process import DiffusionProcess, apply_kernel, as_simplex, sample_categorical

LOSS_KINDS = ("sedd", "mdlm", "udlm", "duo")
# parameterization each loss trains
LOSS_PARAMETERIZATION = {"sedd": "score", "mdlm": "x0-subs", "udlm": "x0-duo", "duo": "x0-duo"}
# process each loss lives on
LOSS_PROCESS = {"sedd": ("absorbing", "uniform"), "mdlm": ("absorbing",),
                "udlm": ("uniform",), "duo": ("uniform",)}


@dataclass(frozen=True)
class LossConfig:
    kind: str
    tau: float = 0.05
    include_constant: bool = False
    n_time_samples: int = 1

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ConfigError(f"unknown loss kind {self.kind!r}")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.n_time_samples < 1:
            raise ConfigError("n_time_samples must be >= 1")


def check_compatible(kind: str, process_kind: str, parameterization: str | None = None):
    if process_kind not in LOSS_PROCESS[kind]:
        raise ConfigError(f"loss {kind!r} is not defined on the {process_kind} process")
    if parameterization is not None and parameterization != LOSS_PARAMETERIZATION[kind]:
        raise ConfigError(f"loss {kind!r} needs a {LOSS_PARAMETERIZATION[kind]} model, "
                          f"got {parameterization}")


def _any_tensor(*xs):
    return any(isinstance(x, Tensor) for x in xs)


def _finish(value: Tensor, tensor_in: bool):
    return value if tensor_in else value.data


def _time_column(process, t, shape):
    """Broadcast per-row times to ``shape + (1,)`` arrays of alpha, alpha', sigma."""
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), shape)
    return (np.asarray(process.alpha(t))[..., None],
            np.asarray(process.alpha_prime(t))[..., None],
            np.asarray(process.sigma(t))[..., None])


def _onehot(tokens, n):
    return np.eye(n)[np.asarray(tokens, dtype=np.int64)]


def _rate_rows(process: DiffusionProcess, x_t):
    """``Q[x_t, y]`` with the diagonal zeroed, shape ``x_t.shape + (N,)``."""
    q = process.matrix.dense()
    np.fill_diagonal(q, 0.0)
    return q[np.asarray(x_t, dtype=np.int64)]


def _ratios(process, alpha, x_t, x0, need):
    """``p(y|x0) / p(x_t|x0)`` for every ``y``; ``need`` marks rows that must be reachable."""
    probs = apply_kernel(process, alpha, x0)
    denom = (probs * _onehot(x_t, process.n)).sum(axis=-1, keepdims=True)
    d = denom.data if isinstance(denom, Tensor) else denom
    zero = d <= 0
    if np.any(zero & need[..., None]):
        raise UnreachableState("x_t has zero probability under the given x0")
    if np.any(zero):
        denom = ad.where(zero, 1.0, denom)
    return probs / denom


def conditional_score(process: DiffusionProcess, t, x_t, x0):
    """Concrete score of the forward conditional: ``p_{t|0}(y|x0) / p_{t|0}(x_t|x0)``."""
    tensor_in = _any_tensor(x0)
    x0v = x0 if tensor_in else as_simplex(x0)
    shape = np.shape(x_t)
    alpha, _, _ = _time_column(process, t, shape)
    need = np.ones(shape, dtype=bool)
    out = _ratios(process, alpha, x_t, ad.as_tensor(x0v), need)
    return _finish(out, tensor_in)


def sedd_integrand(score_out, x_t, x0, t, process: DiffusionProcess,
                   include_constant: bool = False):
    """Score-entropy integrand summed over ``y != x_t``."""
    tensor_in = _any_tensor(score_out, x0)
    raw = score_out.data if isinstance(score_out, Tensor) else np.asarray(score_out)
    shape = np.shape(x_t)
    alpha, _, sigma = _time_column(process, t, shape)
    lam = sigma * _rate_rows(process, x_t)
    if np.any((raw <= 0) & (lam > 0)):
        raise DomainError("score outputs must be strictly positive")
    s = _ratios(process, alpha, x_t, ad.as_tensor(x0), lam.sum(axis=-1) > 0)
    score = ad.as_tensor(score_out)
    # only entries with positive weight reach the logarithm
    safe = ad.where(lam > 0, score, 1.0)
    body = (safe - s * ad.log(safe)) * lam
    if include_constant:
        body = body + (s * ad.log(s) - s) * lam
    return _finish(body.sum(axis=-1), tensor_in)


def sedd_constant(x_t, x0, t, process: DiffusionProcess):
    """Model-free part ``sum lambda (s log s - s)`` of the SEDD Bregman divergence."""
    tensor_in = _any_tensor(x0)
    shape = np.shape(x_t)
    alpha, _, sigma = _time_column(process, t, shape)
    lam = sigma * _rate_rows(process, x_t)
    s = _ratios(process, alpha, x_t, ad.as_tensor(x0), lam.sum(axis=-1) > 0)
    return _finish(((s * ad.log(s) - s) * lam).sum(axis=-1), tensor_in)


def mdlm_weight(process: DiffusionProcess, t):
    alpha = np.asarray(process.alpha(t))
    return -np.asarray(process.alpha_prime(t)) / (1.0 - alpha)


def _keep_columns(process):
    keep = np.ones(process.n)
    if process.mask_index is not None:
        keep[process.mask_index] = 0.0
    return keep


def mdlm_integrand(x0_hat, x_t, x0, t, process: DiffusionProcess):
    """Weighted cross-entropy on masked positions, zero elsewhere."""
    if process.kind != "absorbing":
        raise ConfigError("the MDLM integrand needs the absorbing process")
    tensor_in = _any_tensor(x0_hat, x0)
    shape = np.shape(x_t)
    masked = np.asarray(x_t) == process.mask_index
    w = np.where(masked, np.broadcast_to(mdlm_weight(process, np.broadcast_to(t, shape)), shape), 0.0)
    xe = (ad.as_tensor(x0) * ad.log(x0_hat) * _keep_columns(process)).sum(axis=-1)
    return _finish(-(xe * w), tensor_in)


def _udlm_parts(x_t, x0, x0_hat, t, process):
    if process.kind != "uniform":
        raise ConfigError("the UDLM integrand needs the uniform process")
    shape = np.shape(x_t)
    alpha, _, sigma = _time_column(process, t, shape)
    need = np.ones(shape, dtype=bool)
    a = _ratios(process, alpha, x_t, ad.as_tensor(x0), need)
    b = _ratios(process, alpha, x_t, ad.as_tensor(x0_hat), need)
    return a, b, sigma


def udlm_g(x_t, x0, x0_hat, t, process: DiffusionProcess):
    """Uniform-state integrand ``lambda sum_y [a log(a/b) - a + b]``.

    ``a`` and ``b`` are the forward conditional ratios under the data and the
    prediction respectively. The value is non-negative and vanishes at
    ``x0_hat = x0``.
    """
    tensor_in = _any_tensor(x0, x0_hat)
    a, b, sigma = _udlm_parts(x_t, x0, x0_hat, t, process)
    body = a * (ad.log(a) - ad.log(b)) - a + b
    return _finish(body.sum(axis=-1) * sigma[..., 0], tensor_in)


# ---------------------------------------------------------------- Duo ----


def effective_alpha(alpha_tilde, n: int, resolution: int = 64):
    """Keep probability of the argmax of a Gaussian-relaxed one-hot.

    ``q = P(argmax(a e_1 + sqrt(1 - a^2) eps) = 1)`` by Gauss-Hermite
    quadrature, mapped to ``(q N - 1) / (N - 1)``.
    """
    at = np.asarray(alpha_tilde, dtype=np.float64)
    if np.any(at < 0) or np.any(at > 1):
        raise DomainError("alpha_tilde must lie in [0, 1]")
    nodes, weights = np.polynomial.hermite_e.hermegauss(resolution)
    weights = weights / np.sqrt(2.0 * np.pi)
    s = np.sqrt(np.maximum(1.0 - at * at, 0.0))
    with np.errstate(divide="ignore"):
        shift = np.where(s > 0, at / np.where(s > 0, s, 1.0), np.inf)
    q = (ndtr(nodes + shift[..., None]) ** (n - 1) * weights).sum(axis=-1)
    q = np.where(at >= 1.0, 1.0, q)
    out = (q * n - 1.0) / (n - 1.0)
    return out if out.ndim else float(out)


def alpha_tilde_for(alpha, n: int, iters: int = 60, resolution: int = 64):
    """Invert :func:`effective_alpha` by bisection (it is increasing)."""
    target = np.asarray(alpha, dtype=np.float64)
    lo = np.zeros_like(target)
    hi = np.ones_like(target)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        below = effective_alpha(mid, n, resolution) < target
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    out = 0.5 * (lo + hi)
    out = np.where(target >= 1.0, 1.0, np.where(target <= 0.0, 0.0, out))
    return out if out.ndim else float(out)


@dataclass
class DuoDraw:
    w: object          # array or tensor, shape S + (N,)
    x_t_hard: np.ndarray
    x_t_soft: object   # softmax(w / tau)
    alpha_tilde: np.ndarray


def duo_draw(x0, alpha_tilde, tau: float, rng: np.random.Generator | None = None,
             noise: np.ndarray | None = None) -> DuoDraw:
    """Gaussian reparameterized draw; gradients reach ``x0`` only through ``w``."""
    if tau <= 0:
        raise ConfigError("tau must be positive")
    shape = x0.shape
    if noise is None:
        noise = rng.standard_normal(shape)
    at = np.asarray(alpha_tilde, dtype=np.float64)
    at = at.reshape(at.shape + (1,) * (len(shape) - at.ndim))
    scale = np.sqrt(np.maximum(1.0 - at * at, 0.0))
    w = x0 * at + noise * scale
    wd = w.data if isinstance(w, Tensor) else w
    hard = np.argmax(wd, axis=-1)
    if isinstance(w, Tensor):
        soft = ad.softmax(w * (1.0 / tau), axis=-1)
    else:
        soft = ad.softmax(Tensor(w) * (1.0 / tau), axis=-1).data
    return DuoDraw(w=w, x_t_hard=hard, x_t_soft=soft, alpha_tilde=np.asarray(alpha_tilde))


def duo_integrand(x0_hat, draw: DuoDraw, x0, t, process: DiffusionProcess):
    """UDLM integrand at the hard token, with ``x0_hat`` computed from the soft token."""
    return udlm_g(draw.x_t_hard, x0, x0_hat, t, process)


# --------------------------------------------------- sequence estimator ----


@dataclass
class InnerDraw:
    """Monte Carlo draws of ``(t, x_t)`` reusable across several models."""

    t: np.ndarray            # (R,)
    rows: np.ndarray         # (R,) index of the batch element each draw noises
    x_t: np.ndarray          # (R, L) tokens (the hard token for Duo)
    noise: np.ndarray | None = None        # (R, L, N) Duo only
    alpha_tilde: np.ndarray | None = None  # (R,) Duo only


def antithetic_times(batch: int, pairs: int, rng: np.random.Generator) -> np.ndarray:
    u = rng.random((batch, pairs))
    return np.concatenate([u, 1.0 - u], axis=1)


def _data(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def draw_inner(config: LossConfig, process: DiffusionProcess, x0, rng: np.random.Generator,
               times: np.ndarray | None = None) -> InnerDraw:
    """Draw noise for a batch ``x0`` of shape ``(B, L, N)`` (no gradient involvement)."""
    x0d = _data(x0)
    batch = x0d.shape[0]
    if times is None:
        times = antithetic_times(batch, config.n_time_samples, rng)
    times = np.asarray(times, dtype=np.float64).reshape(batch, -1)
    reps = times.shape[1]
    rows = np.repeat(np.arange(batch), reps)
    t = times.reshape(-1)
    src = x0d[rows]
    if config.kind == "duo":
        at = alpha_tilde_for(process.alpha(t), process.n)
        noise = rng.standard_normal(src.shape)
        draw = duo_draw(src, at, config.tau, noise=noise)
        return InnerDraw(t=t, rows=rows, x_t=draw.x_t_hard, noise=noise, alpha_tilde=at)
    alpha = np.asarray(process.alpha(t))[:, None, None]
    probs = apply_kernel(process, alpha, src)
    return InnerDraw(t=t, rows=rows, x_t=sample_categorical(probs, rng))


def model_input(config: LossConfig, draw: InnerDraw, x0_rows):
    """What the denoiser sees: tokens, or the tempered soft token for Duo."""
    if config.kind != "duo":
        return draw.x_t
    return duo_draw(x0_rows, draw.alpha_tilde, config.tau, noise=draw.noise).x_t_soft


def integrand(config: LossConfig, out, x_t, x0, t, process):
    if config.kind == "sedd":
        return sedd_integrand(out, x_t, x0, t, process, config.include_constant)
    if config.kind == "mdlm":
        return mdlm_integrand(out, x_t, x0, t, process)
    return udlm_g(x_t, x0, out, t, process)


def _rows(x0, rows):
    if isinstance(x0, Tensor):
        return x0[rows]
    return np.asarray(x0, dtype=np.float64)[rows]


def evaluate_inner(config: LossConfig, model_fn, x0, draw: InnerDraw, process) -> object:
    """Per-draw sequence integrand (summed over positions), shape ``(R,)``."""
    x0r = _rows(x0, draw.rows)
    out = model_fn(model_input(config, draw, x0r), draw.t)
    tt = draw.t[:, None]
    return integrand(config, out, draw.x_t, x0r, tt, process).sum(axis=-1)


def sequence_loss(config: LossConfig, model_fn, x0_seq, process: DiffusionProcess,
                  rng: np.random.Generator, times=None):
    """Monte Carlo sequence loss averaged over batch elements and time samples.

    ``x0_seq`` is ``(B, L, N)`` (a single ``(L, N)`` sequence is promoted).
    """
    if _data(x0_seq).ndim == 2:
        x0_seq = x0_seq.reshape(1, *x0_seq.shape)
    draw = draw_inner(config, process, x0_seq, rng, times)
    return evaluate_inner(config, model_fn, x0_seq, draw, process).mean()


def difference_integrand(config: LossConfig, out_teacher, out_fake, x_t, x0, t, process):
    """``integrand(teacher) - integrand(fake)`` with model outputs differenced first.

    Model-free terms never appear, so identical outputs give an exact zero
    (and exactly zero gradients).
    """
    x0t = ad.as_tensor(x0)
    shape = np.shape(x_t)
    alpha, _, sigma = _time_column(process, t, shape)
    if config.kind == "mdlm":
        masked = np.asarray(x_t) == process.mask_index
        w = np.where(masked, np.broadcast_to(mdlm_weight(process, np.broadcast_to(t, shape)), shape), 0.0)
        gap = (ad.log(out_teacher) - ad.log(out_fake)) * _keep_columns(process)
        return -((x0t * gap).sum(axis=-1) * w)
    if config.kind == "sedd":
        lam = sigma * _rate_rows(process, x_t)
        s = _ratios(process, alpha, x_t, x0t, lam.sum(axis=-1) > 0)
        st = ad.where(lam > 0, ad.as_tensor(out_teacher), 1.0)
        sf = ad.where(lam > 0, ad.as_tensor(out_fake), 1.0)
        return (((st - sf) - s * (ad.log(st) - ad.log(sf))) * lam).sum(axis=-1)
    need = np.ones(shape, dtype=bool)
    a = _ratios(process, alpha, x_t, x0t, need)
    bt = _ratios(process, alpha, x_t, ad.as_tensor(out_teacher), need)
    bf = _ratios(process, alpha, x_t, ad.as_tensor(out_fake), need)
    body = -a * (ad.log(bt) - ad.log(bf)) + (bt - bf)
    return body.sum(axis=-1) * sigma[..., 0]


def evaluate_difference(config: LossConfig, teacher_fn, fake_fn, x0, draw: InnerDraw, process):
    """Per-draw ``L(teacher) - L(fake)`` on shared inner draws, shape ``(R,)``."""
    x0r = _rows(x0, draw.rows)
    inp = model_input(config, draw, x0r)
    out_t = teacher_fn(inp, draw.t)
    out_f = fake_fn(inp, draw.t)
    tt = draw.t[:, None]
    return difference_integrand(config, out_t, out_f, draw.x_t, x0r, tt, process).sum(axis=-1)
