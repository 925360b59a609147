import numpy as np
import pytest

from invdistill import autodiff as ad
from invdistill.autodiff import Tensor, finite_difference_check
from invdistill.errors import ConfigError, InputKindError, ShapeError
from invdistill.models import ModelConfig, copy_params, denoiser_forward, ema_update, init_denoiser, score_to_simplex


def tiny(kind, n=5, length=4, mask=True, **kw):
    cfg = ModelConfig(n=n, length=length, d=16, blocks=1, heads=2, mask_index=n - 1 if mask else None, **kw)
    return init_denoiser(cfg, kind, np.random.default_rng(0))


def test_same_seed_same_params():
    a, b = tiny("x0-subs"), tiny("x0-subs")
    assert all(np.array_equal(a.arrays()[k], b.arrays()[k]) for k in a.names())


def test_subs_output_on_masked_input():
    m = tiny("x0-subs")
    out = m(np.full((3, 4), 4), np.full(3, 0.7)).data
    assert out.shape == (3, 4, 5)
    assert np.allclose(out.sum(-1), 1.0) and np.all(out[..., 4] == 0.0)


def test_subs_copies_unmasked_tokens():
    m = tiny("x0-subs")
    x = np.array([[4, 1, 4, 2]])
    out = m(x, np.array([0.5])).data[0]
    assert np.array_equal(out[3], np.eye(5)[2]) and np.array_equal(out[1], np.eye(5)[1])


def test_score_model_is_positive():
    m = tiny("score")
    assert np.all(m(np.array([[0, 4, 4, 1]]), np.array([0.3])).data > 0)


def test_duo_soft_onehot_equals_tokens():
    m = tiny("x0-duo", mask=False)
    x = np.array([[0, 3, 2, 2]])
    soft = np.eye(5)[x]
    assert np.allclose(m(x, np.array([0.4])).data, m(soft, np.array([0.4])).data, atol=1e-14)


def test_unbatched_input_drops_batch_dim():
    m = tiny("x0-subs")
    assert m(np.array([4, 4, 0, 1]), 0.5).data.shape == (4, 5)


def test_input_validation():
    m = tiny("x0-subs")
    with pytest.raises(InputKindError):
        m(np.eye(5)[[0, 1, 2, 3]], 0.5)
    with pytest.raises(ShapeError):
        m(np.array([[0, 9, 1, 1]]), 0.5)
    with pytest.raises(ShapeError):
        m(np.array([[0, 1, 1]]), 0.5)


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(n=5, length=4, d=15, heads=2)
    with pytest.raises(ConfigError):
        ModelConfig(n=5, length=4, dropout=0.1)
    with pytest.raises(ConfigError):
        init_denoiser(ModelConfig(n=5, length=4, d=8), "x0-subs", np.random.default_rng(0))
    with pytest.raises(ConfigError):
        init_denoiser(ModelConfig(n=5, length=4, d=8), "logits", np.random.default_rng(0))


def test_time_conditioning_matters():
    m = tiny("x0-duo", mask=False)
    x = np.array([[0, 1, 2, 3]])
    assert not np.allclose(m(x, 0.1).data, m(x, 0.9).data)
    frozen = tiny("x0-duo", mask=False, time_conditioning=False)
    assert np.array_equal(frozen(x, 0.1).data, frozen(x, 0.9).data)
    assert frozen.time_independent and not m.time_independent


def test_gradient_wrt_simplex_input():
    m = tiny("x0-duo", mask=False)
    m.set_requires_grad(False)
    rng = np.random.default_rng(1)
    x = Tensor(rng.dirichlet(np.ones(5), size=(1, 4)), requires_grad=True)
    w = rng.normal(size=(1, 4, 5))
    err = finite_difference_check(lambda: (ad.log(denoiser_forward(m, x, 0.3)) * w).sum(), [x],
                                  h=1e-5, n_coords=15, rng=rng)
    assert err < 1e-5


def test_copy_is_independent():
    a = tiny("x0-subs")
    x = np.array([[4, 0, 4, 1]])
    before = a(x, 0.5).data.copy()
    b = copy_params(a)
    assert np.array_equal(b(x, 0.5).data, before)
    b["head_w"].data += 1.0
    assert np.array_equal(a(x, 0.5).data, before)


def test_ema_examples():
    live = tiny("x0-subs")
    shadow = copy_params(live)
    for t in shadow.params():
        t.data[...] = 0.0
    for t in live.params():
        t.data[...] = 2.0
    ema_update(shadow, live, 0.5)
    assert all(np.all(v == 1.0) for v in shadow.arrays().values())
    ema_update(shadow, live, 0.0)
    assert all(np.all(v == 2.0) for v in shadow.arrays().values())
    with pytest.raises(ConfigError):
        ema_update(shadow, live, 1.0)


def test_ema_geometric_convergence():
    live, shadow = tiny("x0-subs"), tiny("x0-subs")
    for t in shadow.params():
        t.data[...] = 0.0
    for t in live.params():
        t.data[...] = 1.0
    for _ in range(10):
        ema_update(shadow, live, 0.9)
    assert np.allclose(shadow["head_b"].data, 1.0 - 0.9 ** 10, atol=1e-14)


def test_score_to_simplex():
    score = np.array([[2.0, 6.0, 1.0], [3.0, 3.0, 1.0]])
    out = score_to_simplex(score, np.array([2, 1]), 2)
    assert np.allclose(out, [[0.25, 0.75, 0.0], [0.0, 1.0, 0.0]])
