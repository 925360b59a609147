"""Brute-force ground truth on enumerable sequence spaces.

Clean sequences over ``n_tokens`` symbols are enumerated lexicographically
(first position most significant), which is the C-order flattening of a
``(n_tokens,) * L`` table. Noisy states of an absorbing process also use the
mask symbol ``n_tokens``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InstanceTooLarge, SpecError, UnreachableState
from .losses import (
    LOSS_PROCESS,
    LossConfig,
    difference_integrand,
    integrand,
)
from .process import DiffusionProcess

MAX_STATES = 10 ** 6
QUAD_ORDER = 32
QUAD_CLIP = 0.0
GRADED_PANELS = 8


@dataclass
class ToyDistribution:
    n_tokens: int
    length: int
    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        check_size(self.n_tokens, self.length)
        if self.probs.shape != (self.n_tokens ** self.length,):
            raise SpecError(f"expected {self.n_tokens ** self.length} probabilities, "
                            f"got {self.probs.size}")
        if np.any(self.probs < 0) or abs(self.probs.sum() - 1.0) > 1e-9:
            raise SpecError("probabilities must be non-negative and sum to 1")

    def sequences(self) -> np.ndarray:
        if getattr(self, "_seqs", None) is None:
            self._seqs = enumerate_space(self.n_tokens, self.length)
            self._seqs.flags.writeable = False
        return self._seqs

    def table(self) -> np.ndarray:
        return self.probs.reshape((self.n_tokens,) * self.length)

    def sample(self, count: int, rng: np.random.Generator) -> np.ndarray:
        if getattr(self, "_cdf", None) is None:
            self._cdf = np.cumsum(self.probs)
        u = rng.random(count) * self._cdf[-1]
        idx = np.minimum(np.searchsorted(self._cdf, u, side="right"), self.probs.size - 1)
        return self.sequences()[idx]

    def index_of(self, seqs) -> np.ndarray:
        seqs = np.asarray(seqs, dtype=np.int64)
        weights = self.n_tokens ** np.arange(self.length - 1, -1, -1)
        return seqs @ weights


def check_size(n_tokens: int, length: int, cap: int = MAX_STATES):
    if n_tokens < 1 or length < 1:
        raise ConfigError("n_tokens and length must be positive")
    if n_tokens ** length > cap:
        raise InstanceTooLarge(f"{n_tokens}^{length} states exceed the cap of {cap}")


def enumerate_space(n_tokens: int, length: int, cap: int = MAX_STATES) -> np.ndarray:
    check_size(n_tokens, length, cap)
    grids = np.indices((n_tokens,) * length).reshape(length, -1).T
    return np.ascontiguousarray(grids)


def dirichlet_distribution(n_tokens: int, length: int, rng: np.random.Generator,
                           concentration: float = 1.0) -> ToyDistribution:
    probs = rng.dirichlet(np.full(n_tokens ** length, concentration))
    return ToyDistribution(n_tokens, length, probs)


def delta_distribution(n_tokens: int, length: int, seq) -> ToyDistribution:
    probs = np.zeros(n_tokens ** length)
    weights = n_tokens ** np.arange(length - 1, -1, -1)
    probs[int(np.dot(seq, weights))] = 1.0
    return ToyDistribution(n_tokens, length, probs)


def product_distribution(marginals) -> ToyDistribution:
    marginals = [np.asarray(m, dtype=np.float64) for m in marginals]
    table = marginals[0]
    for m in marginals[1:]:
        table = np.multiply.outer(table, m)
    return ToyDistribution(len(marginals[0]), len(marginals), table.reshape(-1))


def _check_process(p: ToyDistribution, process: DiffusionProcess):
    if process.n_clean != p.n_tokens:
        raise ConfigError(f"process has {process.n_clean} data tokens, distribution "
                          f"has {p.n_tokens}")


def noisy_space(process: DiffusionProcess, length: int) -> np.ndarray:
    return enumerate_space(process.n, length)


def likelihood(process: DiffusionProcess, t, x_t, clean: np.ndarray) -> np.ndarray:
    """``prod_l p_{t|0}(x_t^l | x0^l)`` for rows of ``x_t`` against clean sequences.

    ``x_t``: (R, L); ``t``: scalar or (R,); returns (R, M).
    """
    x_t = np.atleast_2d(np.asarray(x_t, dtype=np.int64))
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x_t.shape[0],))
    out = np.ones((x_t.shape[0], clean.shape[0]))
    for r, tt in enumerate(np.unique(t)):
        rows = np.nonzero(t == tt)[0]
        kernel = process.transition_matrix(tt)
        for l in range(x_t.shape[1]):
            out[rows] *= kernel[x_t[rows, l][:, None], clean[None, :, l]]
    return out


def exact_posterior(p: ToyDistribution, process: DiffusionProcess, t, x_t) -> np.ndarray:
    """Posterior table over clean sequences for a single noisy sequence."""
    _check_process(p, process)
    joint = p.probs * likelihood(process, t, np.asarray(x_t)[None], p.sequences())[0]
    total = joint.sum()
    if total <= 0:
        raise UnreachableState("x_t is unreachable under p")
    return joint / total


def exact_marginal(p: ToyDistribution, process: DiffusionProcess, t) -> np.ndarray:
    """Joint law of ``x_t`` over the full noisy space, in ``noisy_space`` order."""
    _check_process(p, process)
    states = noisy_space(process, p.length)
    return likelihood(process, t, states, p.sequences()) @ p.probs


def _posterior_kernel(process, t):
    """Likelihood kernel used for posteriors.

    On the absorbing process the keep probability cancels from every
    posterior, so a time-free visibility kernel is used; this keeps the
    posterior defined even at the fully masked end point.
    """
    if process.kind == "absorbing":
        return process_visibility(process)
    return process.transition_matrix(t)


def process_visibility(process):
    k = np.eye(process.n)
    k[process.mask_index, :] = 1.0
    return k


def _posterior_tables(p, process, x_t, t, leave_one_out):
    """Per-position posterior marginals over clean tokens, shape (R, L, n_tokens)."""
    x_t = np.atleast_2d(np.asarray(x_t, dtype=np.int64))
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x_t.shape[0],))
    chunk = max(1, 2 * 10 ** 7 // (x_t.shape[1] * p.probs.size))
    if x_t.shape[0] > chunk:
        return np.concatenate([_posterior_chunk(p, process, x_t[i:i + chunk], t[i:i + chunk],
                                                leave_one_out)
                               for i in range(0, x_t.shape[0], chunk)])
    return _posterior_chunk(p, process, x_t, t, leave_one_out)


def _posterior_chunk(p, process, x_t, t, leave_one_out):
    clean = p.sequences()
    rows, length = x_t.shape
    per_pos = np.empty((rows, length, clean.shape[0]))
    for tt in np.unique(t):
        sel = np.nonzero(t == tt)[0]
        kernel = _posterior_kernel(process, tt)
        for l in range(length):
            per_pos[sel, l] = kernel[x_t[sel, l][:, None], clean[None, :, l]]
    onehots = np.eye(p.n_tokens)[clean]  # (M, L, n_tokens)
    out = np.empty((rows, length, p.n_tokens))
    full = per_pos.prod(axis=1) * p.probs
    for l in range(length):
        if leave_one_out:
            w = np.delete(per_pos, l, axis=1).prod(axis=1) * p.probs
        else:
            w = full
        mass = w @ onehots[:, l, :]
        total = mass.sum(axis=-1, keepdims=True)
        reach = full.sum(axis=-1) > 0
        if np.any(~reach):
            raise UnreachableState("x_t is unreachable under p")
        out[:, l] = mass / total
    return out


def _pad(table, process):
    """Embed clean-token rows into the full vocabulary (zero mass on the mask)."""
    if process.kind != "absorbing":
        return table
    out = np.zeros(table.shape[:-1] + (process.n,))
    keep = [i for i in range(process.n) if i != process.mask_index]
    out[..., keep] = table
    return out


class OracleModel:
    """Exact minimizer of a diffusion loss under a known data distribution.

    Called like a denoiser: ``oracle(x_t_tokens, t)``. For ``x0`` losses it
    returns per-position clean-token distributions; for SEDD the concrete
    score ratios. On the absorbing process the posterior given visible
    tokens does not depend on ``t``, which ``time_independent`` reports.
    """

    def __init__(self, p: ToyDistribution, process: DiffusionProcess, loss_kind: str):
        _check_process(p, process)
        if process.kind not in LOSS_PROCESS[loss_kind]:
            raise ConfigError(f"loss {loss_kind!r} is not defined on {process.kind}")
        self.p = p
        self.process = process
        self.loss_kind = loss_kind
        self.time_independent = process.kind == "absorbing" and loss_kind != "sedd"
        self.parameterization = "score" if loss_kind == "sedd" else "x0"

    def pattern_rows(self, pattern) -> np.ndarray:
        """Posterior rows for every state sharing one mask pattern (absorbing only).

        States are ordered lexicographically over the visible positions, as
        in :func:`pattern_states`. Returns ``(states, L, n_tokens)``; visible
        positions hold one-hot rows.
        """
        if self.process.kind != "absorbing":
            raise ConfigError("mask patterns only exist on the absorbing process")
        n, length = self.p.n_tokens, self.p.length
        table = self.p.table()
        visible = [l for l in range(length) if not pattern[l]]
        out = np.zeros((n ** len(visible), length, n))
        eye = np.eye(n)
        for l in range(length):
            if not pattern[l]:
                grids = np.indices((n,) * len(visible)).reshape(len(visible), -1)
                out[:, l, :] = eye[grids[visible.index(l)]]
                continue
            others = tuple(k for k in range(length) if pattern[k] and k != l)
            marg = table.sum(axis=others) if others else table
            # remaining axes: visible positions and l, in position order
            keep = sorted(visible + [l])
            marg = np.moveaxis(marg, keep.index(l), -1).reshape(-1, n)
            total = marg.sum(axis=-1, keepdims=True)
            out[:, l, :] = np.divide(marg, total, out=np.full_like(marg, 1.0 / n), where=total > 0)
        return out

    def posterior_mean(self, x_t, t):
        return _pad(_posterior_tables(self.p, self.process, x_t, t, False), self.process)

    def leave_one_out(self, x_t, t):
        return _pad(_posterior_tables(self.p, self.process, x_t, t, True), self.process)

    def concrete_score(self, x_t, t):
        x_t = np.atleast_2d(np.asarray(x_t, dtype=np.int64))
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x_t.shape[0],))
        loo = self.leave_one_out(x_t, t)
        out = np.empty_like(loo)
        for tt in np.unique(t):
            sel = np.nonzero(t == tt)[0]
            kernel = self.process.transition_matrix(tt)
            num = loo[sel] @ kernel.T                   # p(y | loo) for every y
            den = np.take_along_axis(num, x_t[sel][..., None], axis=-1)
            out[sel] = num / den
        return out

    def __call__(self, x_t, t):
        x_t = np.asarray(x_t)
        squeeze = x_t.ndim == 1
        x_t = np.atleast_2d(x_t)
        if self.loss_kind == "sedd":
            out = self.concrete_score(x_t, t)
        elif self.process.kind == "absorbing":
            out = self.posterior_mean(x_t, t)
            unmasked = x_t != self.process.mask_index
            out[unmasked] = np.eye(self.process.n)[x_t[unmasked]]
        else:
            out = self.leave_one_out(x_t, t)
        return out[0] if squeeze else out


def exact_optimal_fake(p_theta: ToyDistribution, process: DiffusionProcess,
                       loss_kind: str) -> OracleModel:
    return OracleModel(p_theta, process, loss_kind)


def gauss_legendre(order: int, clip: float = QUAD_CLIP, graded: int = GRADED_PANELS):
    """Nodes and weights on ``[clip, 1 - clip]``.

    With ``graded > 0`` the interval is split into panels whose widths shrink
    geometrically (by 10x) toward both endpoints, ``graded`` levels deep on
    each side, with an order-``order`` rule on every panel. Log-linear
    schedules concentrate the integrand within ``eps`` of ``t = 1``, which a
    single panel cannot resolve.
    """
    lo, hi = clip, 1.0 - clip
    if graded:
        inner = [10.0 ** -k for k in range(graded, 0, -1)]
        cuts = [0.0] + inner + [0.5] + [1.0 - x for x in reversed(inner)] + [1.0]
        cuts = np.array(sorted(set(cuts)))
        cuts = lo + (hi - lo) * cuts
    else:
        cuts = np.array([lo, hi])
    base_x, base_w = np.polynomial.legendre.leggauss(order)
    nodes, weights = [], []
    for a, b in zip(cuts[:-1], cuts[1:]):
        nodes.append(a + (b - a) * (base_x + 1) / 2)
        weights.append(base_w * (b - a) / 2)
    return np.concatenate(nodes), np.concatenate(weights)


def _model_table(model_fn, states, t):
    out = model_fn(states, np.broadcast_to(np.asarray(t, dtype=np.float64), (states.shape[0],)))
    return np.asarray(getattr(out, "data", out), dtype=np.float64)


def _quadrature_expectation(p, process, nodes, weights, evaluate):
    """``sum_q w_q E_{x0 ~ p} E_{x_t | x0} [sum_l v_l]`` over every quadrature node at once.

    ``evaluate(x_t, x0, t)`` receives noisy states ``(V, R, L)``, one-hot
    clean tokens ``(V, R, L, N)`` and times ``(V, R, L)`` where ``V`` runs
    over clean tokens and ``R`` over (node, state) pairs; it returns the
    per-position integrand ``(V, R, L)``.
    """
    states = noisy_space(process, p.length)
    clean = p.sequences()
    n_states, length = states.shape
    states_rep = np.tile(states, (len(nodes), 1))
    t_rep = np.repeat(nodes, n_states)
    cols = [v if process.kind != "absorbing" or v < process.mask_index else v + 1
            for v in range(p.n_tokens)]
    x0 = np.eye(process.n)[cols][:, None, None, :]
    shape = (p.n_tokens,) + states_rep.shape
    vals = evaluate(np.broadcast_to(states_rep, shape),
                    np.broadcast_to(x0, shape + (process.n,)),
                    np.broadcast_to(t_rep[:, None], shape), states_rep, t_rep)
    joint = likelihood(process, t_rep, states_rep, clean) * p.probs
    joint = joint * np.repeat(weights, n_states)[:, None]
    total = 0.0
    for l in range(length):
        total += float((joint * vals[clean[:, l], :, l].T).sum())
    return total


def _model_outputs(model_fn, states, t, process):
    """Model table over all noisy states; rows the model rejects come back as NaN."""
    try:
        out = _model_table(model_fn, states, t)
    except UnreachableState:
        # such rows carry no probability mass, so any placeholder will do
        rows = []
        times = np.broadcast_to(np.asarray(t, dtype=np.float64), (states.shape[0],))
        for s, ts in zip(states, times):
            try:
                rows.append(_model_table(model_fn, s[None], ts)[0])
            except UnreachableState:
                rows.append(np.full((states.shape[1], process.n), np.nan))
        out = np.stack(rows)
    bad = np.isnan(out).any(axis=-1)
    return np.where(bad[..., None], 1.0 / process.n, out), bad


def exact_nelbo(p_data: ToyDistribution, model_fn, process: DiffusionProcess, loss_kind: str,
                quad_order: int = QUAD_ORDER, clip: float = QUAD_CLIP,
                include_constant: bool = False) -> float:
    """Exact expected sequence loss, integrated over ``t`` by Gauss-Legendre."""
    _check_process(p_data, process)
    if quad_order < 16:
        raise ConfigError("quad_order must be >= 16")
    kind = "udlm" if loss_kind == "duo" else loss_kind
    cfg = LossConfig(kind=kind, include_constant=include_constant)
    nodes, weights = gauss_legendre(quad_order, clip)

    def evaluate(x_t, x0, tt, states, t):
        out, bad = _model_outputs(model_fn, states, t, process)
        return np.where(bad, 0.0, integrand(cfg, out, x_t, x0, tt, process))

    return _quadrature_expectation(p_data, process, nodes, weights, evaluate)


def exact_idlm_loss(p_theta: ToyDistribution, teacher_fn, process: DiffusionProcess,
                    loss_kind: str, quad_order: int = QUAD_ORDER,
                    clip: float = QUAD_CLIP) -> float:
    """``E_{p_theta}[L(teacher)] - E_{p_theta}[L(optimal fake for p_theta)]``."""
    _check_process(p_theta, process)
    kind = "udlm" if loss_kind == "duo" else loss_kind
    cfg = LossConfig(kind=kind)
    fake = exact_optimal_fake(p_theta, process, kind)
    nodes, weights = gauss_legendre(quad_order, clip)

    def evaluate(x_t, x0, tt, states, t):
        out_t, bad_t = _model_outputs(teacher_fn, states, t, process)
        out_f, bad_f = _model_outputs(fake, states, t, process)
        vals = difference_integrand(cfg, out_t, out_f, x_t, x0, tt, process)
        return np.where(bad_t | bad_f, 0.0, vals.data)

    return _quadrature_expectation(p_theta, process, nodes, weights, evaluate)


def exact_kl(p, q) -> float:
    """``KL(p || q)`` in nats; ``inf`` when ``p`` puts mass outside ``q``'s support."""
    p = np.asarray(getattr(p, "probs", p), dtype=np.float64)
    q = np.asarray(getattr(q, "probs", q), dtype=np.float64)
    support = p > 0
    if np.any(q[support] <= 0):
        return float("inf")
    return float(np.sum(p[support] * (np.log(p[support]) - np.log(q[support]))))


def total_variation(p, q) -> float:
    p = np.asarray(getattr(p, "probs", p), dtype=np.float64)
    q = np.asarray(getattr(q, "probs", q), dtype=np.float64)
    return 0.5 * float(np.abs(p - q).sum())


# ------------------------------------------------ exact sampler laws ----


def _evaluate_states(model_fn, states, t, chunk, process):
    outs = []
    for start in range(0, states.shape[0], chunk):
        part = states[start:start + chunk]
        outs.append(_model_outputs(model_fn, part, t, process)[0])
    return np.concatenate(outs, axis=0) if outs else np.zeros((0,))


def _clean_rows(x0_hat, process):
    """Renormalized clean-token distributions (mask column dropped)."""
    if process.kind == "absorbing":
        keep = [i for i in range(process.n) if i != process.mask_index]
        x0_hat = x0_hat[..., keep]
    return x0_hat / x0_hat.sum(axis=-1, keepdims=True)


def _absorbing_law(model_fn, process, n_tokens, length, grid, greedy, time_independent, chunk):
    from .sampling import greedy_rows

    n = process.n
    m = process.mask_index
    if m != n - 1:
        raise ConfigError("the exact absorbing sampler expects the mask in the last slot")
    law = np.zeros((n,) * length)
    law[(m,) * length] = 1.0
    patterns = list(itertools.product((False, True), repeat=length))
    # states that contain at least one mask, grouped by their mask pattern
    groups = {}
    for pat in patterns:
        if not any(pat):
            continue
        axes = [np.array([m]) if masked else np.arange(n_tokens) for masked in pat]
        grids = np.meshgrid(*axes, indexing="ij")
        groups[pat] = np.stack([g.reshape(-1) for g in grids], axis=1)
    cached = None
    for t, s in zip(grid[:-1], grid[1:]):
        at, as_ = float(process.alpha(t)), float(process.alpha(s))
        if as_ < at:
            raise ConfigError("alpha must be non-increasing in t")
        stay = (1.0 - as_) / (1.0 - at) if at < 1.0 else 0.0
        if cached is None or not time_independent:
            cached = {}
            for pat, states in groups.items():
                if hasattr(model_fn, "pattern_rows") and time_independent:
                    rows = model_fn.pattern_rows(pat)
                else:
                    rows = _clean_rows(_evaluate_states(model_fn, states, t, chunk, process),
                                       process)
                if greedy:
                    rows = greedy_rows(rows)
                cached[pat] = rows
        new = np.zeros_like(law)
        for pat in patterns:
            idx = tuple(slice(m, m + 1) if masked else slice(0, n_tokens) for masked in pat)
            block = law[idx]
            if not any(pat):
                new[idx] += block
                continue
            rows = cached[pat]               # (states, L, n_tokens)
            unmasked = [l for l in range(length) if not pat[l]]
            masked_pos = [l for l in range(length) if pat[l]]
            # every masked position independently stays masked or reveals a token
            out = block.reshape(-1)
            for l in masked_pos:
                step = np.concatenate([(1.0 - stay) * rows[:, l, :],
                                       np.full((rows.shape[0], 1), stay)], axis=1)
                out = out[..., None] * step.reshape((step.shape[0],) + (1,) * (out.ndim - 1) + (n,))
            # axes are (unmasked tokens..., new values at masked positions...)
            out = out.reshape([n_tokens] * len(unmasked) + [n] * len(masked_pos))
            out = np.transpose(out, np.argsort(unmasked + masked_pos))
            tidx = tuple(slice(None) if masked else slice(0, n_tokens) for masked in pat)
            new[tidx] += out
        law = new
    clean = law[(slice(0, n_tokens),) * length].reshape(-1)
    return clean


def _uniform_law(model_fn, process, n_tokens, length, grid, greedy, chunk):
    from .sampling import greedy_rows, ancestral_probs_uniform

    states = enumerate_space(n_tokens, length)
    size = states.shape[0]
    if size * size > 5 * 10 ** 7:
        raise InstanceTooLarge("dense uniform-state composition is limited to 7000 states")
    law = np.full(size, 1.0 / size)
    for t, s in zip(grid[:-1], grid[1:]):
        rows = _clean_rows(_evaluate_states(model_fn, states, t, chunk, process), process)
        if greedy:
            rows = greedy_rows(rows)
        kern = ancestral_probs_uniform(rows, states, float(process.alpha(t)),
                                       float(process.alpha(s)), n_tokens)
        trans = law
        for l in range(length):
            trans = (trans[..., None] * kern[:, l, :].reshape((size,) + (1,) * l + (n_tokens,)))
        law = trans.reshape(size, -1).sum(axis=0)
    return law


def exact_sampler_distribution(model_fn, process: DiffusionProcess, sampler_config,
                               length: int, time_independent: bool | None = None,
                               chunk: int = 8192) -> ToyDistribution:
    """Exact terminal law of ancestral generation, by composing step kernels."""
    n_tokens = process.n_clean
    check_size(process.n, length)
    if time_independent is None:
        time_independent = bool(getattr(model_fn, "time_independent", False))
    grid = sampler_config.grid()
    kind = sampler_config.kind
    if kind == "ancestral-absorbing":
        if process.kind != "absorbing":
            raise ConfigError("ancestral-absorbing needs the absorbing process")
        law = _absorbing_law(model_fn, process, n_tokens, length, grid, False,
                             time_independent, chunk)
    elif kind in ("ancestral-uniform", "greedy-tail"):
        if process.kind != "uniform":
            raise ConfigError(f"{kind} needs the uniform process")
        law = _uniform_law(model_fn, process, n_tokens, length, grid, kind == "greedy-tail", chunk)
    else:
        raise ConfigError(f"no exact composition for sampler {kind!r}")
    law = np.maximum(law, 0.0)
    return ToyDistribution(n_tokens, length, law / law.sum())
