"""Toy instances and the step-reduction experiment."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .distill import DistillConfig, init_state, run_distillation
from .losses import LossConfig
from .models import ModelConfig, init_denoiser
from .optim import OptimizerConfig
from .oracle import ToyDistribution, exact_kl, exact_sampler_distribution
from .process import make_process
from .sampling import SamplerConfig
from .training import train_teacher


def template_distribution(n_tokens: int, length: int, n_templates: int, noise: float,
                          rng: np.random.Generator) -> ToyDistribution:
    """Uniform mixture of random template sequences with per-position corruption.

    Each template is drawn uniformly at random; a sample copies its template
    and replaces every position, with probability ``noise``, by a uniformly
    random token.
    """
    templates = rng.integers(0, n_tokens, size=(n_templates, length))
    table = np.zeros((n_tokens,) * length)
    for tpl in templates:
        comp = np.ones(())
        for l in range(length):
            row = np.full(n_tokens, noise / n_tokens)
            row[tpl[l]] += 1.0 - noise
            comp = np.multiply.outer(comp, row)
        table += comp / n_templates
    return ToyDistribution(n_tokens, length, table.reshape(-1))


@dataclass(frozen=True)
class StepReductionConfig:
    n_tokens: int = 8
    length: int = 6
    n_templates: int = 4
    noise: float = 0.1
    d: int = 32
    blocks: int = 1
    heads: int = 2
    teacher_steps: int = 5000
    teacher_batch: int = 64
    distill_steps: int = 5000
    distill_batch: int = 32
    lr_teacher: float = 1e-3
    lr_fake: float = 1e-4
    lr_student: float = 1e-4
    few_steps: int = 4
    many_steps: int = 64
    use_ema: bool = True
    seed: int = 0


@dataclass
class StepReductionResult:
    k_many: float
    teacher_few: float
    student_few: float
    student_live_few: float
    seconds: float
    log: list = field(default_factory=list)

    @property
    def student_ratio(self) -> float:
        return self.student_few / self.k_many

    @property
    def teacher_ratio(self) -> float:
        return self.teacher_few / self.k_many


def step_reduction_experiment(cfg: StepReductionConfig = StepReductionConfig(),
                              on_progress=None) -> StepReductionResult:
    """Train an MDLM teacher on a template mixture, distill it, and score both exactly.

    Returns the exact reverse KL to the data distribution of the teacher's
    many-step and few-step ancestral samplers and of the distilled student's
    few-step sampler.
    """
    start = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    p_star = template_distribution(cfg.n_tokens, cfg.length, cfg.n_templates, cfg.noise, rng)
    process = make_process("absorbing", cfg.n_tokens + 1)
    mask = process.mask_index
    model_cfg = ModelConfig(n=process.n, length=cfg.length, d=cfg.d, blocks=cfg.blocks,
                            heads=cfg.heads, time_conditioning=False, mask_index=mask)
    teacher = init_denoiser(model_cfg, "x0-subs", rng)
    loss_cfg = LossConfig("mdlm")
    opt = OptimizerConfig(lr_teacher=cfg.lr_teacher, lr_fake=cfg.lr_fake,
                          lr_student=cfg.lr_student)
    log = []

    def note(stage, **values):
        log.append({"stage": stage, **values})
        if on_progress is not None:
            on_progress(log[-1])

    train_teacher(teacher, p_star, process, loss_cfg, opt, cfg.teacher_steps,
                  cfg.teacher_batch, rng)

    def kl_at(model, steps):
        law = exact_sampler_distribution(model, process, SamplerConfig("ancestral-absorbing", steps),
                                         cfg.length, time_independent=True)
        return exact_kl(law, p_star)

    k_many = kl_at(teacher, cfg.many_steps)
    note("teacher", k_many=k_many)
    teacher_few = kl_at(teacher, cfg.few_steps)
    note("teacher", teacher_few=teacher_few)

    state = init_state(teacher)
    run_distillation(state, p_star, process,
                     DistillConfig(loss_cfg, opt, steps=cfg.distill_steps, batch=cfg.distill_batch),
                     rng)
    student_live = kl_at(state.student, cfg.few_steps)
    student_ema = kl_at(state.ema, cfg.few_steps)
    note("student", live=student_live, ema=student_ema)
    return StepReductionResult(
        k_many=k_many, teacher_few=teacher_few,
        student_few=student_ema if cfg.use_ema else student_live,
        student_live_few=student_live, seconds=time.perf_counter() - start, log=log)
