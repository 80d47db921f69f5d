import math

import numpy as np
import pytest

from deepmart.errors import InvalidArgumentError, UnsupportedModelError
from deepmart.market import (GBM, BasketPut, MaxCall, PathBatch, PathPool, brownian_motion,
                             build_grid, euler_step, gbm_to_affine, model_from_dict,
                             monitoring_payoffs, payoff_eval, payoff_from_dict, simulate_paths,
                             simulate_paths_exact_gbm)


def test_grid_examples():
    g = build_grid(3.0, 9, 150)
    assert g.dt == 3.0 / 1350
    assert g.fine_times().size == 1351
    g1 = build_grid(1.0, 1, 1)
    np.testing.assert_array_equal(g1.fine_times(), [0.0, 1.0])
    assert g1.dt == 1.0
    assert build_grid(2.0, 4, 2).node_time(1, 1) == 0.75


def test_grid_tiling_is_exact():
    g = build_grid(3.0, 9, 7)
    for n in range(g.N):
        assert g.node_time(n, g.N0) == g.node_time(n + 1, 0)
    np.testing.assert_array_equal(g.monitoring_times(), g.fine_times()[::g.N0])


@pytest.mark.parametrize("args", [(0.0, 1, 1), (1.0, 0, 1), (1.0, 1, 0), (-1.0, 2, 2)])
def test_grid_rejects_bad_args(args):
    with pytest.raises(InvalidArgumentError):
        build_grid(*args)


def test_zero_dynamics_stay_put():
    m = GBM([100.0, 50.0], 0.05, 0.05, 0.0)
    b = simulate_paths(m, build_grid(1.0, 2, 5), 10, seed=1)
    np.testing.assert_array_equal(b.states, np.broadcast_to(m.x0, b.states.shape))


def test_gbm_first_moment():
    m = GBM([100.0], 0.05, 0.10, 0.2)
    b = simulate_paths(m, build_grid(3.0, 3, 100), 100_000, seed=3)
    xT = b.states[:, -1, 0]
    se = xT.std(ddof=1) / math.sqrt(xT.size)
    assert abs(xT.mean() - 100 * math.exp(-0.15)) <= 3 * se


def test_gbm_variance_and_increment_law():
    m = GBM([100.0, 100.0], 0.05, 0.0, [0.2, 0.3])
    grid = build_grid(1.0, 1, 100)
    b = simulate_paths_exact_gbm(m, grid, 100_000, seed=4)
    T = 1.0
    for d, s in enumerate((0.2, 0.3)):
        x = b.states[:, -1, d]
        mean = 100 * math.exp(0.05 * T)
        var = mean ** 2 * (math.exp(s * s * T) - 1)
        assert abs(x.mean() - mean) <= 4 * math.sqrt(var / x.size)
        # variance of a sample variance, via the fourth central moment
        m4 = np.mean((x - x.mean()) ** 4)
        assert abs(x.var(ddof=1) - var) <= 4 * math.sqrt((m4 - var ** 2) / x.size)
    col = b.dw[:, 17, 1]
    assert abs(col.mean()) <= 5 * math.sqrt(grid.dt / col.size)


def test_euler_single_step():
    assert euler_step(100.0, 5.0, 20.0, 0.01, 0.1) == pytest.approx(102.05)


def test_exact_gbm_deterministic_and_one_step():
    m = GBM([100.0], 0.05, 0.0, 0.0)
    grid = build_grid(2.0, 2, 4)
    b = simulate_paths_exact_gbm(m, grid, 3, seed=0)
    np.testing.assert_allclose(b.states[0, :, 0], 100 * np.exp(0.05 * grid.fine_times()),
                               rtol=1e-14)
    from deepmart import kernels
    out = np.empty((1, 2, 1))
    kernels.exact_gbm(np.array([100.0]), np.array([0.05]), np.array([0.2]), 0.01,
                      np.zeros((1, 1, 1)), out)
    assert out[0, 1, 0] == pytest.approx(100 * math.exp(0.0003), rel=1e-14)


def test_exact_requires_gbm():
    with pytest.raises(UnsupportedModelError):
        simulate_paths_exact_gbm(brownian_motion([0.0]), build_grid(1, 1, 2), 4, seed=0)


def test_exact_and_euler_share_increments():
    m = GBM([90.0, 90.0], 0.05, 0.1, 0.2)
    g = build_grid(1.0, 2, 10)
    a = simulate_paths(m, g, 50, seed=9)
    b = simulate_paths_exact_gbm(m, g, 50, seed=9)
    np.testing.assert_array_equal(a.dw, b.dw)


def test_euler_exact_gap_shrinks_with_n0():
    m = GBM([100.0, 100.0], 0.05, 0.1, 0.2)
    p = MaxCall(100.0, 0.05)
    gaps = []
    for n0 in (10, 50, 150):
        g = build_grid(3.0, 3, n0)
        a = monitoring_payoffs(p, g, simulate_paths(m, g, 4000, seed=2).states)
        b = monitoring_payoffs(p, g, simulate_paths_exact_gbm(m, g, 4000, seed=2).states)
        gaps.append(np.max(np.abs(a.mean(axis=0) - b.mean(axis=0))))
    assert gaps[0] > gaps[1] > gaps[2]


def test_determinism_and_chunk_independence():
    m = GBM([100.0, 90.0, 80.0], 0.05, 0.1, 0.2)
    g = build_grid(1.0, 3, 4)
    a = simulate_paths(m, g, 1000, seed=5, chunk_size=256)
    b = simulate_paths(m, g, 1000, seed=5, chunk_size=256, threads=3)
    np.testing.assert_array_equal(a.states, b.states)
    np.testing.assert_array_equal(a.dw, b.dw)
    np.testing.assert_array_equal(a.states[:, 0], np.broadcast_to(m.x0, (1000, 3)))
    c = simulate_paths(m, g, 1000, seed=6, chunk_size=256)
    assert not np.array_equal(a.dw, c.dw)


def test_gbm_as_affine_matches():
    m = GBM([100.0, 95.0], 0.05, [0.1, 0.0], [0.2, 0.3])
    g = build_grid(3.0, 3, 20)
    a = simulate_paths(m, g, 200, seed=8)
    b = simulate_paths(gbm_to_affine(m), g, 200, seed=8)
    np.testing.assert_allclose(b.states, a.states, rtol=1e-12)


def test_model_dict_round_trip():
    m = GBM([100.0, 95.0], 0.05, [0.1, 0.0], [0.2, 0.3])
    assert model_from_dict(m.to_dict()).to_dict() == m.to_dict()
    af = gbm_to_affine(m)
    np.testing.assert_array_equal(model_from_dict(af.to_dict()).A2, af.A2)


def test_gbm_validation():
    with pytest.raises(InvalidArgumentError):
        GBM([100.0, 100.0], 0.05, [0.1, 0.1, 0.1], 0.2)
    with pytest.raises(InvalidArgumentError):
        GBM([100.0], 0.05, 0.1, -0.2)


def test_payoff_examples():
    assert payoff_eval(MaxCall(100, 0.05), 0.0, [90.0, 95.0]) == 0.0
    assert payoff_eval(MaxCall(100, 0.05), 1.0, [110.0, 95.0]) == pytest.approx(9.51229, abs=1e-5)
    assert payoff_eval(BasketPut(100, 0.05, D=2), 0.0, [80.0, 100.0]) == pytest.approx(10.0)
    with pytest.raises(InvalidArgumentError):
        payoff_eval(BasketPut(100, 0.05, D=2), 0.0, [80.0, 100.0, 1.0])
    p = payoff_from_dict(MaxCall(100, 0.05, D=3).to_dict())
    assert p == MaxCall(100, 0.05, D=3)


def test_payoffs_nonnegative():
    rng = np.random.default_rng(0)
    x = rng.uniform(0, 200, size=(1000, 4))
    t = rng.uniform(0, 3, size=1000)
    assert np.all(MaxCall(100, 0.05)(t, x) >= 0)
    assert np.all(BasketPut(100, 0.05)(t, x) >= 0)


def test_raw_dump_round_trip(tmp_path):
    m = GBM([100.0, 90.0], 0.05, 0.1, 0.2)
    g = build_grid(3.0, 3, 4)
    b = simulate_paths(m, g, 17, seed=1)
    path = tmp_path / "paths.dmpb"
    b.to_raw(path)
    raw = path.read_bytes()
    assert raw[:4] == b"DMPB" and len(raw) == 32 + 8 * (b.states.size + b.dw.size)
    again = PathBatch.from_raw(path, T=3.0)
    np.testing.assert_array_equal(again.states, b.states)
    np.testing.assert_array_equal(again.dw, b.dw)
    assert again.grid == g


def test_batch_views():
    m = GBM([100.0], 0.05, 0.1, 0.2)
    g = build_grid(1.0, 2, 3)
    b = simulate_paths(m, g, 4, seed=0)
    assert b.interval_states(1).shape == (4, 3, 1)
    np.testing.assert_array_equal(b.interval_states(1)[:, 0], b.monitoring_states()[:, 1])
    np.testing.assert_array_equal(b.interval_dw(1), b.dw[:, 3:6])
    with pytest.raises(ValueError):
        b.states[0, 0, 0] = 1.0


def test_pool_chunks_regenerate():
    m = GBM([100.0], 0.05, 0.1, 0.2)
    g = build_grid(1.0, 2, 3)
    pool = PathPool(m, g, 3, 8, seed=(0, 1), cache_bytes=0)
    a, b = pool.chunk(1), pool.chunk(1)
    np.testing.assert_array_equal(a.states, b.states)
    assert not np.array_equal(pool.chunk(0).dw, a.dw)
    assert pool.J == 24 and pool.slice(2) == slice(16, 24)
