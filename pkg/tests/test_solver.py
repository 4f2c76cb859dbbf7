import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sfps.errors import ConfigError
from sfps.network import LayerParams, ModelState
from sfps.solver import LrPolicy, SolverConfig, SolverState, apply_update, lr_at


def lp(w, b=None):
    return LayerParams(np.array(w, dtype=np.float64), None if b is None else np.array(b, dtype=np.float64))


def test_plain_step():
    g = np.array([[1.0, -2.0], [0.5, 4.0]])
    p = lp(np.zeros((2, 2)))
    v = lp(np.zeros((2, 2)))
    apply_update(p, LayerParams(g), v, SolverConfig(epsilon=0.1), 0)
    assert np.allclose(p.weight, -0.1 * g, rtol=0, atol=1e-17)


def test_zero_grad_zero_velocity_is_noop():
    p = lp([[1.0, 2.0]], [3.0])
    v = lp(np.zeros((1, 2)), [0.0])
    apply_update(p, lp(np.zeros((1, 2)), [0.0]), v, SolverConfig(epsilon=0.5, momentum=0.9), 0)
    assert p.weight.tolist() == [[1.0, 2.0]] and p.bias.tolist() == [3.0]


def test_momentum_recurrence():
    cfg = SolverConfig(epsilon=0.05, momentum=0.9, weight_decay=0.01, total_iters=10)
    rng = np.random.default_rng(0)
    w0 = rng.standard_normal((2, 2))
    grads = [rng.standard_normal((2, 2)) for _ in range(3)]
    p, v = lp(w0.copy()), lp(np.zeros((2, 2)))
    for t, g in enumerate(grads):
        apply_update(p, LayerParams(g), v, cfg, t)
    for i in range(2):
        for j in range(2):
            w, vel = w0[i, j], 0.0
            for g in grads:
                vel = 0.9 * vel - 0.05 * (g[i, j] + 0.01 * w)
                w += vel
            assert p.weight[i, j] == pytest.approx(w, rel=1e-12)


def test_two_half_steps_equal_one_full_step():
    g = np.random.default_rng(1).standard_normal((3, 2))
    a, b = lp(np.ones((3, 2))), lp(np.ones((3, 2)))
    half = SolverConfig(epsilon=0.125)
    apply_update(a, LayerParams(g), lp(np.zeros((3, 2))), half, 0)
    apply_update(a, LayerParams(g), lp(np.zeros((3, 2))), half, 0)
    apply_update(b, LayerParams(g), lp(np.zeros((3, 2))), SolverConfig(epsilon=0.25), 0)
    assert np.allclose(a.weight, b.weight, rtol=1e-14, atol=0)


def test_lr_policies():
    assert all(lr_at(SolverConfig(epsilon=0.007, total_iters=100), t) == 0.007 for t in range(100))
    step = SolverConfig(epsilon=0.005, lr_policy="step", gamma=0.1, step_size=10, total_iters=100)
    assert lr_at(step, 25) == pytest.approx(0.00005, rel=1e-12)
    poly = SolverConfig(epsilon=0.01, lr_policy=LrPolicy.POLYNOMIAL, power=0.5, total_iters=40)
    assert lr_at(poly, 40) == 0.0
    assert lr_at(poly, 10) == pytest.approx(0.01 * 0.75**0.5)


def test_lr_out_of_range():
    cfg = SolverConfig(total_iters=5)
    with pytest.raises(ConfigError):
        lr_at(cfg, 5)
    with pytest.raises(ConfigError):
        lr_at(cfg, -1)


@pytest.mark.parametrize("kw", [dict(epsilon=0), dict(momentum=1.0), dict(weight_decay=-1), dict(total_iters=0)])
def test_bad_config(kw):
    with pytest.raises(ConfigError):
        SolverConfig(**kw)


def test_state_mirrors_shapes():
    st_ = ModelState({1: lp(np.ones((2, 3)), np.ones(2)), 3: lp(np.ones((4, 2)))})
    s = SolverState.zeros_like(st_)
    assert s.velocity[1].weight.shape == (2, 3) and s.velocity[1].bias.shape == (2,)
    assert s.velocity[3].bias is None


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(2, 5), st.integers(0, 10_000))
def test_summed_update_is_one_update(P, n, seed):
    # applying the sum of P gradients once is what the server does per clock
    rng = np.random.default_rng(seed)
    gs = [rng.standard_normal((n, n)) for _ in range(P)]
    cfg = SolverConfig(epsilon=0.1, momentum=0.5)
    a = lp(np.zeros((n, n)))
    apply_update(a, LayerParams(sum(gs)), lp(np.zeros((n, n))), cfg, 0)
    ref = -0.1 * sum(gs)
    assert np.allclose(a.weight, ref, rtol=1e-12, atol=1e-14)
