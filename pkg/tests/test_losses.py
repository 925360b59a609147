import math

import numpy as np
import pytest
from scipy.stats import norm

from invdistill import autodiff as ad
from invdistill.autodiff import Tape, Tensor, backward
from invdistill.errors import ConfigError, DomainError
from invdistill.losses import (
    LossConfig,
    alpha_tilde_for,
    check_compatible,
    conditional_score,
    difference_integrand,
    draw_inner,
    duo_draw,
    duo_integrand,
    effective_alpha,
    mdlm_integrand,
    sedd_constant,
    sedd_integrand,
    sequence_loss,
    udlm_g,
)
from invdistill.models import ModelConfig, init_denoiser
from invdistill.process import NoiseSchedule, make_process

LINEAR = NoiseSchedule("linear-alpha", 0.0)


def test_conditional_score_examples():
    p = make_process("absorbing", 3, LINEAR)
    assert np.allclose(conditional_score(p, 0.5, 2, [1, 0, 0]), [1.0, 0.0, 1.0])
    assert conditional_score(p, 0.5, 2, [0.5, 0.5, 0])[0] == pytest.approx(0.5)
    u = make_process("uniform", 3, LINEAR)
    s = conditional_score(u, 1e-9, 1, [0, 1, 0])
    assert s[1] == 1.0 and max(s[0], s[2]) < 1e-8


def test_sedd_bregman_minimum_and_constant():
    rng = np.random.default_rng(0)
    for kind in ("absorbing", "uniform"):
        p = make_process(kind, 4)
        for _ in range(20):
            x0 = rng.dirichlet(np.ones(p.n_clean))
            x0 = np.append(x0, 0.0) if kind == "absorbing" else x0
            t = rng.uniform(0.05, 0.95)
            x_t = int(rng.integers(p.n))
            if kind == "absorbing" and x_t != p.mask_index:
                x0 = np.eye(4)[x_t]
            s = conditional_score(p, t, x_t, x0)
            assert abs(sedd_integrand(s, x_t, x0, t, p, include_constant=True)) < 1e-12
            plain = sedd_integrand(s, x_t, x0, t, p)
            assert plain == pytest.approx(-sedd_constant(x_t, x0, t, p), abs=1e-12)


def test_sedd_single_entry_value():
    p = make_process("absorbing", 2, LINEAR)
    t = 0.5
    val = sedd_integrand(np.array([2.0, 1.0]), 1, np.array([1.0, 0.0]), t, p)
    # weight sigma_t Q[m, a], ratio s = 1: per unit weight 2 - log 2
    assert val / float(p.sigma(t)) == pytest.approx(2.0 - math.log(2.0), abs=1e-12)


def test_sedd_needs_positive_scores():
    p = make_process("absorbing", 3)
    with pytest.raises(DomainError):
        sedd_integrand(np.array([0.0, 1.0, 1.0]), 2, np.array([1.0, 0, 0]), 0.5, p)


def test_mdlm_examples():
    p = make_process("absorbing", 3, LINEAR)
    x0 = np.array([1.0, 0.0, 0.0])
    assert mdlm_integrand(np.array([0.25, 0.75, 0.0]), 2, x0, 0.5, p) == pytest.approx(2 * math.log(4))
    assert mdlm_integrand(np.array([0.25, 0.75, 0.0]), 0, x0, 0.5, p) == 0.0
    assert mdlm_integrand(x0, 2, x0, 0.5, p) == 0.0


def test_udlm_examples():
    u = make_process("uniform", 2, LINEAR)
    t = 0.5
    x0 = np.array([1.0, 0.0])
    assert udlm_g(1, x0, x0, t, u) == 0.0
    val = udlm_g(1, x0, np.array([0.5, 0.5]), t, u)
    # forward conditionals 0.75/0.25 under x0 and 0.5/0.5 under the prediction
    a, b = 0.75 / 0.25, 1.0
    assert val == pytest.approx(float(u.sigma(t)) * (a * math.log(a / b) - a + b), abs=1e-12)


def test_udlm_nonnegative():
    rng = np.random.default_rng(4)
    u = make_process("uniform", 5)
    for _ in range(200):
        x0, xh = rng.dirichlet(np.ones(5)), rng.dirichlet(np.ones(5))
        assert udlm_g(int(rng.integers(5)), x0, xh, rng.uniform(0.01, 0.99), u) >= -1e-12


def test_effective_alpha_endpoints_and_mc():
    assert effective_alpha(1.0, 4) == 1.0
    assert abs(effective_alpha(0.0, 4)) < 1e-6
    rng = np.random.default_rng(0)
    w = 0.8 * np.eye(4)[0] + math.sqrt(1 - 0.64) * rng.standard_normal((200_000, 4))
    q = np.mean(np.argmax(w, axis=1) == 0)
    assert effective_alpha(0.8, 4) == pytest.approx((4 * q - 1) / 3, abs=0.006)


def test_effective_alpha_matches_one_dimensional_integral():
    from scipy.integrate import quad

    a, n = 0.6, 3
    s = math.sqrt(1 - a * a)
    q = quad(lambda z: norm.pdf(z) * norm.cdf(z + a / s) ** (n - 1), -12, 12, epsabs=1e-13)[0]
    assert effective_alpha(a, n) == pytest.approx((q * n - 1) / (n - 1), abs=1e-10)


def test_alpha_tilde_inverts():
    for alpha in (0.05, 0.3, 0.9):
        assert effective_alpha(alpha_tilde_for(alpha, 6), 6) == pytest.approx(alpha, abs=1e-12)


def test_duo_draw_examples():
    x0 = np.eye(4)[[2]]
    d = duo_draw(x0, 0.7, 0.1, noise=np.zeros((1, 4)))
    assert d.x_t_hard[0] == 2
    rng = np.random.default_rng(0)
    draws = duo_draw(np.tile(np.eye(4)[0], (100_000, 1)), 0.0, 0.1, rng).x_t_hard
    freq = np.bincount(draws, minlength=4) / draws.size
    assert np.all(np.abs(freq - 0.25) < 3 * math.sqrt(0.25 * 0.75 / draws.size))
    sharp = duo_draw(np.array([[0.2, 0.5, 0.3]]), 0.5, 0.01, noise=np.array([[0.1, 0.3, -0.2]]))
    assert np.abs(sharp.x_t_soft - np.eye(3)[sharp.x_t_hard]).max() < 1e-6


def test_duo_integrand_zero_at_truth():
    u = make_process("uniform", 4)
    x0 = np.eye(4)[[1]]
    d = duo_draw(x0, np.array([0.6]), 0.1, np.random.default_rng(0))
    assert float(duo_integrand(x0, d, x0, np.array([0.4]), u)[0]) == 0.0


def test_duo_gradient_reaches_x0_through_soft_input():
    u = make_process("uniform", 4)
    cfg = ModelConfig(n=4, length=2, d=8, blocks=1, heads=2)
    m = init_denoiser(cfg, "x0-duo", np.random.default_rng(0)).set_requires_grad(False)
    x0 = Tensor(np.random.default_rng(1).dirichlet(np.ones(4), size=(1, 2)), requires_grad=True)
    with Tape() as tape:
        loss = sequence_loss(LossConfig("duo"), m, x0, u, np.random.default_rng(2), times=np.array([[0.5]]))
    g = backward(loss, tape)[x0]
    assert np.abs(g).max() > 0


def test_difference_integrand_is_exactly_zero_for_equal_models():
    p = make_process("absorbing", 4)
    cfg = ModelConfig(n=4, length=3, d=8, blocks=1, heads=2, mask_index=3)
    m = init_denoiser(cfg, "x0-subs", np.random.default_rng(0))
    x0 = np.eye(4)[[[0, 1, 2]]]
    draw = draw_inner(LossConfig("mdlm"), p, x0, np.random.default_rng(1))
    out = m(draw.x_t, draw.t)
    val = difference_integrand(LossConfig("mdlm"), out, out, draw.x_t, x0, draw.t[:, None], p)
    assert np.all(val.data == 0.0)


def test_compatibility_rules():
    check_compatible("sedd", "uniform", "score")
    with pytest.raises(ConfigError):
        check_compatible("mdlm", "uniform")
    with pytest.raises(ConfigError):
        check_compatible("duo", "uniform", "x0-subs")
    with pytest.raises(ConfigError):
        LossConfig("elbo")
