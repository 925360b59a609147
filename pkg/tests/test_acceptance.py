"""Acceptance suite: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -s`` (or directly as a script) to
see the report lines. Criterion 5 trains a teacher and a student for 5k
steps each and takes three to six minutes on one core.
"""

import math
import os
import sys
import time

import numpy as np
import pytest
from scipy.linalg import expm

from invdistill.autodiff import finite_difference_check
from invdistill.losses import LOSS_PARAMETERIZATION, LossConfig, duo_draw, effective_alpha, sedd_integrand, \
    sequence_loss
from invdistill.models import ModelConfig, init_denoiser, score_to_simplex
from invdistill.oracle import (
    OracleModel,
    dirichlet_distribution,
    exact_idlm_loss,
    exact_kl,
    exact_marginal,
    exact_posterior,
    exact_sampler_distribution,
    noisy_space,
    total_variation,
)
from invdistill.process import NoiseSchedule, make_process, sample_xt, transition_from_alpha
from invdistill.sampling import SamplerConfig

sys.path.insert(0, os.path.dirname(__file__))

ZERO = NoiseSchedule("log-linear", 0.0)


@pytest.fixture
def report(capsys):
    def emit(number, ok, detail, started):
        with capsys.disabled():
            print(f"\ncriterion {number}: {'PASS' if ok else 'FAIL'}  {detail}  ({time.perf_counter() - started:.1f}s)")
    return emit


def test_criterion_1_kernel_exactness(report):
    start = time.perf_counter()
    rng = np.random.default_rng(101)
    worst = 0.0
    for kind in ("absorbing", "uniform"):
        for n in (2, 3, 5):
            process = make_process(kind, n)
            q = process.matrix.dense()
            for sbar in rng.uniform(0.0, 5.0, size=20):
                closed = transition_from_alpha(process, math.exp(-process.rate_scale * sbar))
                worst = max(worst, float(np.abs(closed - expm(sbar * q)).max()))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-10 and elapsed < 5
    report(1, ok, f"max entry error {worst:.2e} (< 1e-10)", start)
    assert ok


def test_criterion_2_gradient_correctness(report):
    start = time.perf_counter()
    errors = {}
    for kind, process_kind in (("mdlm", "absorbing"), ("sedd", "absorbing"), ("udlm", "uniform"),
                               ("duo", "uniform")):
        process = make_process(process_kind, 6)
        cfg = ModelConfig(n=6, length=4, d=16, blocks=1, heads=2, mask_index=process.mask_index)
        rng = np.random.default_rng(202)
        model = init_denoiser(cfg, LOSS_PARAMETERIZATION[kind], rng)
        n_clean = process.n_clean
        x0 = np.eye(6)[rng.integers(0, n_clean, size=(1, 4))]
        loss_cfg = LossConfig(kind)

        def loss():
            return sequence_loss(loss_cfg, model, x0, process, np.random.default_rng(7), times=np.array([[0.37]]))

        errors[kind] = finite_difference_check(loss, model.params(), h=3e-3, n_coords=100, rng=rng, stencil=4)
    elapsed = time.perf_counter() - start
    ok = max(errors.values()) < 1e-5 and elapsed < 60
    detail = " ".join(f"{k}={v:.1e}" for k, v in errors.items())
    report(2, ok, f"max relative error {detail} (< 1e-5)", start)
    assert ok


def test_criterion_3_idlm_loss_bounds_kl(report):
    start = time.perf_counter()
    rng = np.random.default_rng(303)
    gap, at_truth, uniqueness = math.inf, 0.0, True
    for process, kind in ((make_process("absorbing", 4, ZERO), "mdlm"), (make_process("absorbing", 4, ZERO), "sedd"),
                          (make_process("uniform", 3), "udlm")):
        p_star = dirichlet_distribution(3, 2, rng)
        teacher = OracleModel(p_star, process, kind)
        at_truth = max(at_truth, abs(exact_idlm_loss(p_star, teacher, process, kind)))
        for _ in range(20):
            p_theta = dirichlet_distribution(3, 2, rng)
            loss = exact_idlm_loss(p_theta, teacher, process, kind)
            kl = exact_kl(p_theta, p_star)
            gap = min(gap, loss - kl)
            if loss <= 1e-8 and kl > 1e-7:
                uniqueness = False
    elapsed = time.perf_counter() - start
    ok = gap >= -1e-9 and at_truth <= 1e-8 and uniqueness and elapsed < 120
    report(3, ok, f"min(loss - KL) {gap:.2e} (>= -1e-9), |loss| at p* {at_truth:.1e} (<= 1e-8)", start)
    assert ok


def _position_posteriors(p, process, t, x_t):
    joint = exact_posterior(p, process, t, x_t)
    seqs = p.sequences()
    out = np.zeros((len(x_t), process.n))
    for l in range(len(x_t)):
        np.add.at(out[l], seqs[:, l], joint)
    return out


def test_criterion_4_sedd_mdlm_share_the_bayes_posterior(report):
    start = time.perf_counter()
    rng = np.random.default_rng(404)
    worst = 0.0
    for trial in range(10):
        n_tokens, length = (2, 2) if trial % 2 else (3, 2)
        p = dirichlet_distribution(n_tokens, length, rng)
        process = make_process("absorbing", n_tokens + 1)
        mask = process.mask_index
        mdlm = OracleModel(p, process, "mdlm")
        t = float(rng.uniform(0.05, 0.95))
        marg = exact_marginal(p, process, t)
        states = noisy_space(process, length)
        weights = (process.n ** np.arange(length - 1, -1, -1))
        for x_t in states:
            if not np.any(x_t == mask):
                continue
            bayes = _position_posteriors(p, process, t, x_t)
            x0_mdlm = mdlm(x_t[None], t)[0]
            # score minimizer: ratios of noisy marginals for single-position changes
            score = np.zeros((length, process.n))
            for l in range(length):
                for y in range(process.n):
                    z = x_t.copy()
                    z[l] = y
                    score[l, y] = marg[int(z @ weights)] / marg[int(x_t @ weights)]
            x0_sedd = score_to_simplex(score, x_t, mask)
            for l in np.flatnonzero(x_t == mask):
                worst = max(worst, total_variation(x0_mdlm[l], bayes[l]), total_variation(x0_sedd[l], bayes[l]))
    # Bregman form of score entropy is non-negative for any positive score
    lowest = math.inf
    for kind, n in (("absorbing", 5), ("uniform", 5)):
        process = make_process(kind, n)
        x0_tok = rng.integers(0, process.n_clean, size=5000)
        x0 = np.eye(n)[x0_tok]
        t = rng.uniform(0.01, 1.0, size=5000)
        x_t = sample_xt(process, t, x0_tok, rng)
        score = np.exp(rng.normal(0.0, 2.0, size=(5000, n)))
        vals = sedd_integrand(score, x_t, x0, t, process, include_constant=True)
        lowest = min(lowest, float(np.min(vals)))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-9 and lowest >= 0.0 and elapsed < 120
    report(4, ok, f"posterior TV {worst:.1e} (< 1e-9), min SEDD integrand {lowest:.2e} over 10^4 (>= 0)", start)
    assert ok


@pytest.mark.slow
def test_criterion_5_distillation_step_reduction(report):
    from invdistill.experiments import StepReductionConfig, step_reduction_experiment

    start = time.perf_counter()
    res = step_reduction_experiment(StepReductionConfig())
    student_ok = res.student_few <= 1.25 * res.k_many
    teacher_ok = res.teacher_few >= 2.0 * res.k_many
    ok = student_ok and teacher_ok and res.seconds < 15 * 60
    report(5, ok, f"K64 {res.k_many:.4f}, teacher 4-step {res.teacher_few:.4f} ({res.teacher_ratio:.2f}x, >= 2), "
                  f"student 4-step {res.student_few:.4f} ({res.student_ratio:.2f}x, <= 1.25)", start)
    assert teacher_ok, "teacher 4-step KL is not >= 2 x K64"
    assert student_ok, "student 4-step KL exceeds 1.25 x K64"
    assert res.seconds < 15 * 60


def test_criterion_6_sampler_fidelity(report):
    start = time.perf_counter()
    rng = np.random.default_rng(606)
    p = dirichlet_distribution(3, 2, rng)
    tvs = {}
    for kind, sampler, loss in (("absorbing", "ancestral-absorbing", "mdlm"), ("uniform", "ancestral-uniform", "udlm")):
        process = make_process(kind, 4 if kind == "absorbing" else 3)
        law = exact_sampler_distribution(OracleModel(p, process, loss), process, SamplerConfig(sampler, 64), 2)
        tvs[sampler] = total_variation(law, p)
    elapsed = time.perf_counter() - start
    ok = max(tvs.values()) < 0.02 and elapsed < 60
    report(6, ok, " ".join(f"{k} TV {v:.4f}" for k, v in tvs.items()) + " (< 0.02)", start)
    assert ok


def test_criterion_7_duo_duality(report):
    start = time.perf_counter()
    rng = np.random.default_rng(707)
    a1, a0 = effective_alpha(1.0, 4), effective_alpha(0.0, 4)
    ends_ok = a1 == 1.0 and abs(a0) < 1e-6
    w = 0.8 * np.eye(4)[0] + math.sqrt(1 - 0.64) * rng.standard_normal((1_000_000, 4))
    keep = np.mean(np.argmax(w, axis=1) == 0)
    mc = (4 * keep - 1) / 3
    quad = effective_alpha(0.8, 4)
    draws = duo_draw(np.tile(np.eye(4)[2], (100_000, 1)), 0.8, 0.1, rng).x_t_hard
    freq = np.bincount(draws, minlength=4) / draws.size
    implied = quad * np.eye(4)[2] + (1 - quad) / 4
    tv = total_variation(freq, implied)
    elapsed = time.perf_counter() - start
    ok = ends_ok and abs(quad - mc) < 0.003 and tv < 0.02 and elapsed < 120
    report(7, ok, f"alpha(1)={a1}, alpha(0)={a0:.1e}, quadrature vs MC {abs(quad - mc):.1e} (< 0.003), "
                  f"argmax marginal TV {tv:.4f} (< 0.02)", start)
    assert ok


def test_criterion_8_cli_determinism(report, tmp_path):
    from test_cli import pipeline

    start = time.perf_counter()
    codes_a, a = pipeline(str(tmp_path / "a"))
    codes_b, b = pipeline(str(tmp_path / "b"))
    differing = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    ok = codes_a == codes_b == [0] * len(codes_a) and not differing
    report(8, ok, f"{len(a)} output files from {len(codes_a)} commands, differing: {differing or 'none'}", start)
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s", "-p", "no:cacheprovider"]))
