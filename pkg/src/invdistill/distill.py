"""Inverse distillation: alternate fake-model and student-generator updates.

The fake model is fit to the student's outputs with the ordinary diffusion
loss. The student then minimizes the teacher's loss minus the fake's loss
on its own outputs, both evaluated on the same inner ``(t, x_t)`` draws.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DataError
from .losses import (
    LossConfig,
    check_compatible,
    draw_inner,
    duo_draw,
    alpha_tilde_for,
    evaluate_difference,
    sequence_loss,
)
from .models import DenoiserParams, copy_params, denoiser_forward, ema_update, score_to_simplex
from .optim import AdamState, OptimizerConfig, adamw_step, grad_norm
from .process import DiffusionProcess, sample_xt
from .training import onehot_batch


@dataclass
class DistillState:
    teacher: DenoiserParams
    fake: DenoiserParams
    student: DenoiserParams
    ema: DenoiserParams
    fake_opt: AdamState = field(default_factory=AdamState)
    student_opt: AdamState = field(default_factory=AdamState)
    step: int = 0


@dataclass(frozen=True)
class DistillConfig:
    loss: LossConfig
    optimizer: OptimizerConfig = OptimizerConfig()
    steps: int = 5000
    batch: int = 32
    fake_per_student: int = 1
    seed: int = 0


@dataclass
class ConditioningBatch:
    """What the student sees: noisy input plus its time."""

    inputs: object        # tokens (B, L) or soft rows (B, L, N) for Duo
    t: np.ndarray         # (B,)


def init_state(teacher: DenoiserParams) -> DistillState:
    """Copy the teacher into fake, student and the student's EMA shadow."""
    teacher.set_requires_grad(False)
    return DistillState(teacher=teacher, fake=copy_params(teacher), student=copy_params(teacher),
                        ema=copy_params(teacher).set_requires_grad(False))


def sampling_func(dataset, process: DiffusionProcess, loss_cfg: LossConfig, batch: int,
                  rng: np.random.Generator, t=None) -> ConditioningBatch:
    """Draw clean data, a time per element and the matching noisy student input."""
    if getattr(dataset, "size", 1) == 0:
        raise DataError("dataset is empty")
    x0 = np.asarray(dataset.sample(batch, rng), dtype=np.int64)
    t = rng.random(batch) if t is None else np.broadcast_to(np.asarray(t, float), (batch,))
    if loss_cfg.kind == "duo":
        at = alpha_tilde_for(process.alpha(t), process.n)
        draw = duo_draw(onehot_batch(x0, process.n), at[:, None], loss_cfg.tau, rng)
        return ConditioningBatch(inputs=draw.x_t_soft, t=t)
    return ConditioningBatch(inputs=sample_xt(process, t[:, None], x0, rng), t=t)


def student_forward_as_data(student: DenoiserParams, cond: ConditioningBatch):
    """Student output as simplex rows (differentiable in the student weights)."""
    out = denoiser_forward(student, cond.inputs, cond.t)
    if student.parameterization == "score":
        return score_to_simplex(out, cond.inputs, student.config.mask_index)
    return out


def _param_grads(params: DenoiserParams, grads):
    return {k: grads[t] for k, t in params.tensors.items()}


def fake_update(state: DistillState, cond: ConditioningBatch, loss_cfg: LossConfig,
                process: DiffusionProcess, opt_cfg: OptimizerConfig, rng: np.random.Generator):
    """Fit the fake to the (stop-gradient) student outputs. Returns (loss, grad norm)."""
    x0 = student_forward_as_data(state.student, cond).data
    with ad.Tape() as tape:
        loss = sequence_loss(loss_cfg, state.fake, x0, process, rng)
    grads = _param_grads(state.fake, ad.backward(loss, tape))
    adamw_step(state.fake.arrays(), grads, state.fake_opt, opt_cfg.lr_fake, opt_cfg)
    return float(loss.data), grad_norm(grads)


def student_objective(state: DistillState, cond: ConditioningBatch, loss_cfg: LossConfig,
                      process: DiffusionProcess, rng: np.random.Generator):
    """Tape-recorded estimate of ``L(teacher) - L(fake)`` on the student's outputs."""
    x0 = student_forward_as_data(state.student, cond)
    draw = draw_inner(loss_cfg, process, x0, rng)
    return evaluate_difference(loss_cfg, state.teacher, state.fake, x0, draw, process).mean(), x0


def student_update(state: DistillState, cond: ConditioningBatch, loss_cfg: LossConfig,
                   process: DiffusionProcess, opt_cfg: OptimizerConfig, rng: np.random.Generator):
    """One generator step plus EMA. Returns (objective, grad norm, batch entropy)."""
    state.fake.set_requires_grad(False)
    try:
        with ad.Tape() as tape:
            loss, x0 = student_objective(state, cond, loss_cfg, process, rng)
        grads = _param_grads(state.student, ad.backward(loss, tape))
    finally:
        state.fake.set_requires_grad(True)
    adamw_step(state.student.arrays(), grads, state.student_opt, opt_cfg.lr_student, opt_cfg)
    ema_update(state.ema, state.student, opt_cfg.ema_decay)
    return float(loss.data), grad_norm(grads), mean_row_entropy(x0.data, process)


def mean_row_entropy(x0: np.ndarray, process: DiffusionProcess) -> float:
    """Average per-sequence entropy of the argmax tokens of a simplex batch."""
    from .metrics import sequence_entropy

    return float(np.mean(sequence_entropy(np.argmax(x0, axis=-1))))


METRIC_COLUMNS = ("step", "loss_fake", "loss_student", "grad_norm_fake", "grad_norm_student",
                  "entropy", "nll", "exact_kl", "clip_rate", "wall_time_ms")


def run_distillation(state: DistillState, dataset, process: DiffusionProcess,
                     config: DistillConfig, rng: np.random.Generator, on_step=None,
                     evaluate=None, timed: bool = False) -> DistillState:
    """Alternate fake and student updates until ``config.steps`` is reached.

    ``state.step`` may be non-zero when resuming; together with the rng state
    stored alongside it the continued run reproduces the uninterrupted one.
    ``evaluate(state)`` may return a dict of extra metrics (e.g. ``exact_kl``);
    ``on_step(row)`` receives one metrics dict per step.
    """
    loss_cfg = config.loss
    check_compatible(loss_cfg.kind, process.kind, state.teacher.parameterization)
    if config.fake_per_student < 1:
        raise ConfigError("fake_per_student must be >= 1")
    opt = config.optimizer
    while state.step < config.steps:
        start = time.perf_counter()
        for _ in range(config.fake_per_student):
            cond = sampling_func(dataset, process, loss_cfg, config.batch, rng)
            loss_f, gn_f = fake_update(state, cond, loss_cfg, process, opt, rng)
        cond = sampling_func(dataset, process, loss_cfg, config.batch, rng)
        loss_s, gn_s, ent = student_update(state, cond, loss_cfg, process, opt, rng)
        state.step += 1
        row = {"step": state.step, "loss_fake": loss_f, "loss_student": loss_s,
               "grad_norm_fake": gn_f, "grad_norm_student": gn_s, "entropy": ent,
               "nll": float("nan"), "exact_kl": float("nan"), "clip_rate": 0.0,
               "wall_time_ms": 0.0}
        if evaluate is not None:
            row.update(evaluate(state) or {})
        if timed:
            row["wall_time_ms"] = (time.perf_counter() - start) * 1e3
        if on_step is not None:
            on_step(row)
    return state
