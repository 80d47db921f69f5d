import math

import numpy as np
import pytest

from deepmart.dual import (DualModel, DualTrainer, direct_upper, dual_value_direct,
                           dual_value_recursive, evaluate_upper, load_dual_model,
                           martingale_increment, recursive_upper, save_dual_model, stage_step,
                           train_dual_all, train_dual_stage, zero_dual_model)
from deepmart.errors import InvalidArgumentError
from deepmart.market import (GBM, LinearPayoff, MaxCall, brownian_motion, build_grid,
                             monitoring_payoffs, simulate_paths)
from deepmart.nn import MlpArchitecture, init_xavier, zero_params
from deepmart.training import FeatureScaling, TrainConfig


def constant_net(c):
    c = np.asarray(c, float)
    p = zero_params(MlpArchitecture(1 + c.size, c.size, (3,)))
    p.biases[-1][:] = c
    return p


def test_constant_integrand_telescopes():
    m = GBM([100.0, 90.0], 0.05, 0.1, 0.2)
    grid = build_grid(1.0, 3, 6)
    b = simulate_paths(m, grid, 50, seed=1)
    c = np.array([0.7, -1.3])
    xi = martingale_increment(constant_net(c), b, 1)
    w = np.cumsum(b.dw, axis=1)
    expected = (w[:, 11] - w[:, 5]) @ c
    np.testing.assert_allclose(xi, expected, rtol=1e-12)
    np.testing.assert_array_equal(martingale_increment(constant_net([0.0, 0.0]), b, 2), 0.0)
    with pytest.raises(InvalidArgumentError):
        martingale_increment(constant_net(c), b, 3)


def test_increment_has_zero_mean():
    m = GBM([100.0, 100.0], 0.05, 0.1, 0.2)
    grid = build_grid(1.0, 2, 4)
    b = simulate_paths(m, grid, 100_000, seed=2)
    net = init_xavier(MlpArchitecture(3, 2, (8, 8)), 3)
    xi = martingale_increment(net, b, 1, FeatureScaling.for_model(m))
    assert abs(xi.mean()) <= 5 * xi.std(ddof=1) / math.sqrt(xi.size)


def test_recursion_special_cases():
    rng = np.random.default_rng(0)
    g = rng.normal(size=(100, 5))
    np.testing.assert_array_equal(recursive_upper(g, np.zeros((100, 4))), g.max(axis=1))
    g1, xi1 = rng.normal(size=(100, 2)), rng.normal(size=(100, 1))
    np.testing.assert_allclose(recursive_upper(g1, xi1),
                               g1[:, 0] + np.maximum(g1[:, 1] - xi1[:, 0] - g1[:, 0], 0.0),
                               rtol=0, atol=1e-15)
    with pytest.raises(InvalidArgumentError):
        recursive_upper(g, np.zeros((100, 5)))


def test_recursion_matches_direct_form():
    rng = np.random.default_rng(1)
    g = rng.exponential(5.0, size=(10_000, 10))
    xi = rng.normal(scale=3.0, size=(10_000, 9))
    np.testing.assert_allclose(recursive_upper(g, xi), direct_upper(g, xi), rtol=0, atol=1e-12)


def test_value_helpers_on_batches():
    m = GBM([100.0], 0.05, 0.1, 0.2)
    p = MaxCall(100.0, 0.05)
    grid = build_grid(3.0, 3, 4)
    b = simulate_paths(m, grid, 500, seed=5)
    xi = np.random.default_rng(0).normal(size=(500, 3))
    np.testing.assert_allclose(dual_value_recursive(p, grid, b, xi),
                               dual_value_direct(p, grid, b, xi), atol=1e-12)


def test_error_propagation_bound():
    rng = np.random.default_rng(7)
    g = rng.exponential(3.0, size=(5000, 6))
    xi = rng.normal(size=(5000, 5))
    for n in range(5):
        delta = rng.normal(scale=2.0, size=5000)
        xi2 = xi.copy()
        xi2[:, n] += delta
        diff = np.abs(recursive_upper(g, xi) - recursive_upper(g, xi2))
        assert np.all(diff <= np.abs(delta) + 1e-12)


def test_zero_steps_returns_init():
    m = brownian_motion([0.0])
    grid = build_grid(1.0, 1, 4)
    cfg = TrainConfig(steps=0, batch=16)
    net = train_dual_stage(0, [], cfg, m, LinearPayoff(D=1), grid)
    ref = init_xavier(cfg.dual_arch(1), (cfg.seed, 4, 0))
    np.testing.assert_array_equal(net.flat(), ref.flat())
    with pytest.raises(InvalidArgumentError):
        train_dual_stage(0, [net], cfg, m, LinearPayoff(D=1), grid)


@pytest.fixture(scope="module")
def toy():
    """Brownian motion, g(t, x) = x, one period: the optimal integrand is 1."""
    m = brownian_motion([0.0])
    p = LinearPayoff(D=1)
    grid = build_grid(1.0, 1, 20)
    cfg = TrainConfig(steps=300, batch=512, sampling="fresh")
    trainer = DualTrainer(cfg, m, p, grid)
    trainer.train_stage(0)
    return m, p, grid, cfg, trainer


def test_toy_training(toy):
    m, p, grid, cfg, trainer = toy
    dm = trainer.result()
    res = evaluate_upper(dm, 50_000, seed=11)
    b = simulate_paths(m, grid, 50_000, seed=(11, 8, 0))
    var_g = monitoring_payoffs(p, grid, b.states)[:, 1].var(ddof=1)
    assert res.sigma_U ** 2 < 0.05 * var_g
    assert abs(res.U0 - 0.0) <= 1e-2
    assert res.per_path_u.mean() == pytest.approx(res.U0)
    z = dm.integrand(0, 0.5, [[-1.0], [0.0], [1.0]])
    np.testing.assert_allclose(z, 1.0, atol=0.1)


def test_toy_loss_decreases(toy):
    m, p, grid, cfg, trainer = toy
    # loss is mean(g_0 + (g_1 - xi - g_0)^+) = E[(W_1 - xi)^+]: about 0.4 at z = 0, 0 at z = 1
    start = float(np.mean(trainer.histories[0][:5]))
    end = float(np.mean(trainer.histories[0][-20:]))
    assert end <= 0.5 * start


def test_zero_martingale_is_loose_upper_bound(toy):
    m, p, grid, cfg, trainer = toy
    dm = trainer.result()
    # below one evaluation chunk, so the paths are a single (seed, namespace, 0) stream
    zero = evaluate_upper(zero_dual_model(m, p, grid), 4000, seed=12)
    trained = evaluate_upper(dm, 4000, seed=12)
    b = simulate_paths(m, grid, 4000, seed=(12, 8, 0))
    np.testing.assert_allclose(zero.per_path_u, monitoring_payoffs(p, grid, b.states).max(axis=1))
    assert zero.U0 >= trained.U0 - 3 * trained.sigma_U / math.sqrt(4000)


def test_trained_increments_have_zero_mean(toy):
    m, p, grid, cfg, trainer = toy
    dm = trainer.result()
    b = simulate_paths(m, grid, 100_000, seed=99)
    xi = dm.increments(b)[:, 0]
    assert abs(xi.mean()) <= 5 * xi.std(ddof=1) / math.sqrt(xi.size)


def test_pool_mode_and_determinism():
    m = GBM([100.0, 100.0], 0.05, 0.1, 0.2)
    p = MaxCall(100.0, 0.05)
    grid = build_grid(1.0, 2, 5)
    cfg = TrainConfig(steps=15, batch=64, sampling="pool", pool_batches=3, width=6)
    a = train_dual_all(cfg, m, p, grid)
    b = train_dual_all(cfg, m, p, grid)
    for na, nb in zip(a.nets, b.nets):
        np.testing.assert_array_equal(na.flat(), nb.flat())
    ra, rb = evaluate_upper(a, 1000, 3), evaluate_upper(b, 1000, 3)
    assert ra.U0 == rb.U0 and ra.sigma_U == rb.sigma_U


def test_stage_order_enforced():
    m = brownian_motion([0.0])
    trainer = DualTrainer(TrainConfig(steps=1, batch=8), m, LinearPayoff(D=1),
                          build_grid(1.0, 2, 2))
    with pytest.raises(InvalidArgumentError):
        trainer.train_stage(0)


def test_stage_step_gradient_matches_finite_difference():
    rng = np.random.default_rng(4)
    net = init_xavier(MlpArchitecture(2, 1, (5,)), 1)
    J, N0 = 40, 3
    inputs = rng.normal(size=(J * N0, 2))
    dw = rng.normal(scale=0.3, size=(J, N0, 1))
    g_n, cont = rng.normal(size=J), rng.normal(size=J) + 1.0
    loss, grads = stage_step(net, inputs, dw, g_n, cont, 2.0)
    h = 1e-6
    a = net.biases[-1]
    keep = a[0]
    a[0] = keep + h
    lp = stage_step(net, inputs, dw, g_n, cont, 2.0)[0]
    a[0] = keep - h
    lm = stage_step(net, inputs, dw, g_n, cont, 2.0)[0]
    a[0] = keep
    assert grads.biases[-1][0] == pytest.approx((lp - lm) / (2 * h), rel=1e-5)


def test_evaluate_upper_rejects_tiny_j1(toy):
    with pytest.raises(InvalidArgumentError):
        evaluate_upper(toy[4].result(), 1, seed=0)


def test_checkpoint_round_trip(tmp_path, toy):
    m, p, grid, cfg, trainer = toy
    dm = trainer.result()
    save_dual_model(dm, tmp_path / "dual", extra={"seed": 0})
    again = load_dual_model(tmp_path / "dual")
    assert isinstance(again, DualModel)
    np.testing.assert_array_equal(again.nets[0].flat(), dm.nets[0].flat())
    r1, r2 = evaluate_upper(dm, 2000, 5), evaluate_upper(again, 2000, 5)
    assert r1.U0 == r2.U0
