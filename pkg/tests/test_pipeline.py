"""End-to-end checks in one dimension, where the binomial tree is exact."""
import math

import numpy as np
import pytest

from deepmart.dual import evaluate_upper, zero_dual_model, DualModel
from deepmart.experiment import ExperimentConfig, run_experiment, sweep_n0
from deepmart.lattice import binomial_bermudan_1d
from deepmart.nn import init_xavier
from deepmart.primal import PrimalModel, evaluate_lower
from deepmart.training import FeatureScaling, TrainConfig


def put_config(**training):
    t = {"steps": 250, "batch": 256, "pool_batches": 8}
    t.update(training)
    return ExperimentConfig.from_dict({
        "model": {"kind": "gbm", "dim": 1, "s0": 100.0, "r": 0.05, "delta": 0.0, "sigma": 0.2},
        "payoff": {"kind": "basketput", "K": 100.0, "r": 0.05},
        "grid": {"T": 1.0, "N": 4, "N0": 25},
        "network": {"width": 20},
        "training": t,
        "evaluation": {"J1": 40_000},
    })


@pytest.fixture(scope="module")
def put_row():
    return run_experiment(put_config(), write=False)


def test_d1_put_bounds_bracket_the_tree(put_row):
    exact = binomial_bermudan_1d(100.0, 100.0, 0.05, 0.0, 0.2, 1.0, 4, 500, kind="put")
    se_U = put_row.sigma_U / math.sqrt(put_row.J1)
    se_L = put_row.sigma_L / math.sqrt(put_row.J1)
    assert put_row.U0 >= exact - 3 * se_U
    assert put_row.L0 <= exact + 3 * se_L
    # a short training run still lands close to the exact value
    assert put_row.U0 - exact < 0.25 and exact - put_row.L0 < 0.25
    assert put_row.ci_lo <= exact <= put_row.ci_hi


def test_weak_duality_for_arbitrary_networks():
    cfg = put_config()
    model, payoff, grid = cfg.build()
    tc = TrainConfig(width=8)
    scaling = FeatureScaling.for_model(model)
    for seed in range(3):
        dual = DualModel([init_xavier(tc.dual_arch(1), (seed, n)) for n in range(grid.N)],
                         grid, payoff, model, scaling)
        primal = PrimalModel([None] + [init_xavier(tc.primal_arch(1), (seed, 50 + n))
                                       for n in range(1, grid.N)] + [None],
                             grid, payoff, model, scaling, stop_at_zero=False)
        for dm in (dual, zero_dual_model(model, payoff, grid)):
            u = evaluate_upper(dm, 20_000, seed=7)
            lo = evaluate_lower(primal, 20_000, seed=7)
            joint = math.sqrt(u.sigma_U ** 2 + lo.sigma_L ** 2) / math.sqrt(20_000)
            assert u.U0 >= lo.L0 - 3 * joint


def test_toy_variance_shrinks_with_n0(tmp_path):
    cfg = ExperimentConfig.from_dict({
        "model": {"kind": "brownian", "dim": 1, "s0": 10.0},
        "payoff": {"kind": "linear", "r": 0.0},
        "grid": {"T": 1.0, "N": 1},
        "network": {"width": 10},
        "training": {"steps": 300, "batch": 512, "pool_batches": 4},
        "evaluation": {"J1": 20_000},
    })
    # the remaining spread is training noise, so its size is measured across seeds
    n0s, seeds = [5, 20, 80], range(4)
    sig = np.empty((len(seeds), len(n0s)))
    for i, seed in enumerate(seeds):
        rows = sweep_n0(cfg.replace(training={"seed": seed}), n0s, tmp_path / str(seed))
        assert [r.N0 for r in rows] == n0s
        assert all(abs(r.U0 - r.L0) <= 0.02 * 10.0 for r in rows)
        sig[i] = [r.sigma_U for r in rows]
    mean = sig.mean(axis=0)
    se = sig.std(axis=0, ddof=1) / math.sqrt(len(seeds))
    for k in range(len(n0s) - 1):
        assert mean[k + 1] <= mean[k] + 2 * math.hypot(se[k], se[k + 1])
