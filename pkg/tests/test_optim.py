import numpy as np
import pytest

from invdistill.errors import ConfigError, ShapeError
from invdistill.optim import AdamState, OptimizerConfig, adamw_step, grad_norm, warmup_lr


def test_zero_gradient_leaves_params():
    p = {"w": np.array([1.0, -2.0])}
    adamw_step(p, {"w": np.zeros(2)}, AdamState(), 0.1, OptimizerConfig(warmup=0))
    assert np.array_equal(p["w"], [1.0, -2.0])


def test_first_step_size_is_lr():
    p = {"w": np.array([0.5])}
    adamw_step(p, {"w": np.array([1.0])}, AdamState(), 0.1, OptimizerConfig(warmup=0, eps=0.0))
    assert p["w"][0] == pytest.approx(0.4, abs=1e-15)


def test_matches_reference_recurrence():
    rng = np.random.default_rng(0)
    cfg = OptimizerConfig(warmup=0, weight_decay=0.01)
    p = {"w": rng.normal(size=3)}
    ref, m, v = p["w"].copy(), np.zeros(3), np.zeros(3)
    state = AdamState()
    for k in range(1, 6):
        g = rng.normal(size=3)
        adamw_step(p, {"w": g}, state, 0.01, cfg)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref * (1 - 0.01 * 0.01) - 0.01 * (m / (1 - 0.9 ** k)) / (np.sqrt(v / (1 - 0.999 ** k)) + 1e-8)
    assert np.allclose(p["w"], ref, rtol=1e-14, atol=1e-15)


def test_warmup():
    assert warmup_lr(1e-3, 100, 0) == 0.0
    assert warmup_lr(1e-3, 100, 50) == pytest.approx(5e-4)
    assert warmup_lr(1e-3, 100, 500) == 1e-3
    p = {"w": np.array([1.0])}
    adamw_step(p, {"w": np.array([3.0])}, AdamState(), 0.1, OptimizerConfig(warmup=100))
    assert p["w"][0] == 1.0


def test_validation():
    with pytest.raises(ConfigError):
        OptimizerConfig(ema_decay=1.0)
    with pytest.raises(ShapeError):
        adamw_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, AdamState(), 0.1, OptimizerConfig())
    assert grad_norm({"a": np.array([3.0]), "b": np.array([4.0])}) == 5.0
