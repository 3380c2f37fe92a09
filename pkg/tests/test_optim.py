import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trunet.errors import ConfigError
from trunet.optim import Adam, OptimizerConfig, clip_by_global_norm, global_norm
from trunet.tensor import Parameter


def params_with_grads(grads):
    out = []
    for i, g in enumerate(grads):
        p = Parameter(np.ones_like(g), name=f"p{i}")
        p.grad = np.array(g, dtype=np.float64)
        out.append(p)
    return out


def test_clip_scales_norm_ten_to_four_point_five():
    g = [np.array([6.0, 0.0]), np.array([[0.0, 8.0]])]
    clipped, norm = clip_by_global_norm(g, 4.5)
    assert norm == 10.0
    np.testing.assert_allclose(clipped[0], [2.7, 0.0], rtol=1e-15)
    np.testing.assert_allclose(clipped[1], [[0.0, 3.6]], rtol=1e-15)


def test_clip_leaves_small_gradients():
    g = [np.array([0.3, 0.4])]
    clipped, norm = clip_by_global_norm(g, 4.5)
    assert norm == pytest.approx(0.5) and clipped[0] is g[0]


@given(st.integers(0, 10_000), st.floats(1e-3, 10.0))
@settings(max_examples=50, deadline=None)
def test_post_clip_norm_bounded(seed, clip):
    g = np.random.default_rng(seed)
    grads = [g.standard_normal(g.integers(1, 6, size=2)) * 10 ** g.uniform(-3, 3) for _ in range(3)]
    clipped, _ = clip_by_global_norm(grads, clip)
    assert global_norm(clipped) <= clip + 1e-6


def test_adam_applies_clipped_gradient():
    # one sign-like Adam step sees only the direction, so test via the first moment
    params = params_with_grads([np.array([6.0, 0.0]), np.array([0.0, 8.0])])
    opt = Adam(params, OptimizerConfig(learning_rate=1e-3, beta1=0.5, clip_norm=4.5))
    info = opt.step()
    assert info.grad_norm == 10.0
    assert info.clipped_norm == pytest.approx(4.5, rel=1e-15)
    np.testing.assert_allclose(opt.m[0], 0.5 * np.array([2.7, 0.0]), rtol=1e-15)
    np.testing.assert_allclose(opt.m[1], 0.5 * np.array([0.0, 3.6]), rtol=1e-15)


def test_adam_first_step_oracle():
    g = np.array([0.2, -1.5, 3.0])
    (p,) = params_with_grads([g])
    cfg = OptimizerConfig(learning_rate=0.01, beta1=0.9, beta2=0.99, clip_norm=100.0, eps=1e-8)
    Adam([p], cfg).step()
    # bias-corrected moments equal g and g^2 after one step
    np.testing.assert_allclose(p.data, 1.0 - 0.01 * g / (np.abs(g) + 1e-8), rtol=1e-12)


def test_adam_two_step_loop_oracle():
    g1, g2 = np.array([0.5, -2.0]), np.array([1.0, 0.25])
    cfg = OptimizerConfig(learning_rate=0.05, beta1=0.8, beta2=0.95, clip_norm=1e9, eps=1e-8)
    (p,) = params_with_grads([g1])
    opt = Adam([p], cfg)
    opt.step()
    p.grad = g2.copy()
    opt.step()
    want = np.ones(2)
    m = v = np.zeros(2)
    for t, g in enumerate([g1, g2], 1):
        m = 0.8 * m + 0.2 * g
        v = 0.95 * v + 0.05 * g * g
        want = want - 0.05 * (m / (1 - 0.8 ** t)) / (np.sqrt(v / (1 - 0.95 ** t)) + 1e-8)
    np.testing.assert_allclose(p.data, want, rtol=1e-12)


@pytest.mark.parametrize("variant", ["adam", "rectified_adam"])
def test_zero_learning_rate_is_bit_identical(variant):
    g = np.random.default_rng(0)
    params = params_with_grads([g.standard_normal((3, 4)), g.standard_normal(5)])
    for p in params:
        p.data = g.standard_normal(p.shape)
        p.data[0] = -0.0
    before = [p.data.copy() for p in params]
    opt = Adam(params, OptimizerConfig(learning_rate=0.0, variant=variant))
    for _ in range(25):
        opt.step()
    for a, p in zip(before, params):
        assert a.tobytes() == p.data.tobytes()


def test_warmup_is_linear_and_exact():
    cfg = OptimizerConfig(learning_rate=3e-3, warmup_steps=7)
    for k in range(7):
        assert cfg.lr_at(k) == 3e-3 * k / 7
    assert cfg.lr_at(7) == cfg.lr_at(100) == 3e-3
    (p,) = params_with_grads([np.ones(2)])
    opt = Adam([p], cfg)
    assert [opt.step().lr for _ in range(9)] == [cfg.lr_at(k) for k in range(1, 10)]


def test_rectified_adam_falls_back_to_momentum_early():
    cfg = OptimizerConfig(learning_rate=0.1, beta2=0.999, clip_norm=1e9, variant="rectified_adam")
    (p,) = params_with_grads([np.array([2.0])])
    Adam([p], cfg).step()
    # first steps are un-adapted SGD with momentum: 1 - lr * m_hat
    assert p.data[0] == pytest.approx(1.0 - 0.1 * 2.0, rel=1e-12)


def test_rectified_adam_term_matches_closed_form():
    cfg = OptimizerConfig(beta2=0.9, variant="rectified_adam")
    opt = Adam([], cfg)
    rho_inf = 2 / (1 - 0.9) - 1
    for t in range(1, 40):
        opt.t = t
        rho = rho_inf - 2 * t * 0.9 ** t / (1 - 0.9 ** t)
        got = opt._rectifier()
        if rho <= 4:
            assert got is None
        else:
            want = math.sqrt((rho - 4) * (rho - 2) * rho_inf / ((rho_inf - 4) * (rho_inf - 2) * rho))
            assert got == pytest.approx(want, rel=1e-12)
    assert opt._rectifier() == pytest.approx(1.0, abs=0.05)


def test_missing_gradients_count_as_zero():
    p = Parameter(np.ones(3))
    p.grad = None
    Adam([p], OptimizerConfig(learning_rate=0.1)).step()
    np.testing.assert_array_equal(p.data, np.ones(3))


def test_config_validation():
    for kwargs in [dict(learning_rate=-1.0), dict(beta1=1.0), dict(beta2=0.0), dict(clip_norm=0.0),
                   dict(warmup_steps=-1), dict(variant="sgd")]:
        with pytest.raises(ConfigError):
            OptimizerConfig(**kwargs)
