"""Teacher training: plain minimization of a diffusion loss on data samples."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .losses import LossConfig, check_compatible, sequence_loss
from .models import DenoiserParams
from .optim import AdamState, OptimizerConfig, adamw_step, grad_norm
from .process import DiffusionProcess


def onehot_batch(tokens, n: int) -> np.ndarray:
    return np.eye(n)[np.asarray(tokens, dtype=np.int64)]


def loss_and_grads(model: DenoiserParams, x0, loss_cfg: LossConfig, process: DiffusionProcess,
                   rng: np.random.Generator):
    with ad.Tape() as tape:
        loss = sequence_loss(loss_cfg, model, x0, process, rng)
    grads = ad.backward(loss, tape)
    return float(loss.data), {k: grads[t] for k, t in model.tensors.items()}


def teacher_step(model: DenoiserParams, tokens, process: DiffusionProcess, loss_cfg: LossConfig,
                 state: AdamState, opt_cfg: OptimizerConfig, rng: np.random.Generator):
    """One optimizer step on a batch of clean token sequences. Returns (loss, grad norm)."""
    loss, grads = loss_and_grads(model, onehot_batch(tokens, process.n), loss_cfg, process, rng)
    adamw_step(model.arrays(), grads, state, opt_cfg.lr_teacher, opt_cfg)
    return loss, grad_norm(grads)


def train_teacher(model: DenoiserParams, dataset, process: DiffusionProcess, loss_cfg: LossConfig,
                  opt_cfg: OptimizerConfig, steps: int, batch: int, rng: np.random.Generator,
                  on_step=None) -> AdamState:
    """Train ``model`` in place; ``on_step(step, loss, grad_norm)`` is called after every step."""
    check_compatible(loss_cfg.kind, process.kind, model.parameterization)
    state = AdamState()
    for step in range(1, steps + 1):
        tokens = dataset.sample(batch, rng)
        loss, gnorm = teacher_step(model, tokens, process, loss_cfg, state, opt_cfg, rng)
        if on_step is not None:
            on_step(step, loss, gnorm)
    return state
