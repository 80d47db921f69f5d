import math

import numpy as np
import pytest

from deepmart.errors import InvalidArgumentError, TrainingDivergenceError
from deepmart.nn import (AdamState, MlpArchitecture, MlpParams, adam_step, forward,
                         forward_backward, init_xavier, params_from_bytes, params_to_bytes,
                         piecewise_lr, zero_params)
from deepmart.training import TrainConfig

from gradcheck import gradient_check


def test_parameter_count():
    arch = MlpArchitecture(3, 2, (42, 42, 42))
    assert arch.n_params == 3 * 42 + 42 + 2 * (42 * 42 + 42) + 42 * 2 + 2
    assert zero_params(arch).flat().size == arch.n_params


@pytest.mark.parametrize("kw", [dict(widths=()), dict(widths=(0,)), dict(bound=0.0),
                                dict(hidden_activation="tanh"), dict(output_activation="relu")])
def test_architecture_validation(kw):
    base = dict(in_dim=2, out_dim=1, widths=(4,))
    base.update(kw)
    with pytest.raises(InvalidArgumentError):
        MlpArchitecture(**base)


def test_xavier_moments_and_determinism():
    arch = MlpArchitecture(150, 120, (100,))
    p = init_xavier(arch, seed=1)
    W = p.weights[0].ravel()
    var = 2.0 / (150 + 100)
    assert abs(W.mean()) <= 4 * math.sqrt(var / W.size)
    assert abs(W.var() / var - 1.0) < 0.1
    assert all(np.all(b == 0) for b in p.biases)
    q = init_xavier(arch, seed=1)
    np.testing.assert_array_equal(p.flat(), q.flat())
    assert not np.array_equal(p.flat(), init_xavier(arch, seed=2).flat())


def test_bounded_relu_clamps():
    arch = MlpArchitecture(1, 1, (1,), "bounded_relu", 100.0)
    p = MlpParams(arch, [np.array([[1.0]]), np.array([[1.0]])], [np.zeros(1), np.zeros(1)])
    assert forward(p, [150.0])[0] == 100.0
    assert forward(p, [-5.0])[0] == 0.0
    assert forward(p, [42.0])[0] == 42.0


def test_zero_weights_give_final_bias():
    arch = MlpArchitecture(3, 2, (5, 5))
    p = zero_params(arch)
    p.biases[-1][:] = [1.5, -2.0]
    p.biases[0][:] = 7.0
    out = forward(p, np.random.default_rng(0).normal(size=(10, 3)) * 1000)
    np.testing.assert_array_equal(out, np.broadcast_to([1.5, -2.0], (10, 2)))


def test_hand_built_relu_net():
    arch = MlpArchitecture(2, 1, (2,), "relu")
    # hidden pre-activations: W^T x + b with W stored (fan_in, fan_out)
    W1 = np.array([[2.0, -1.0], [1.0, 3.0]])
    b1 = np.array([1.0, 0.0])
    W2 = np.array([[1.0], [-2.0]])
    b2 = np.array([0.5])
    p = MlpParams(arch, [W1, W2], [b1, b2])
    # x = (1, -1): h = relu((2 - 1 + 1, -1 - 3 + 0)) = relu((2, -4)) = (2, 0); y = 2 + 0.5
    assert forward(p, [1.0, -1.0])[0] == 2.5


def test_sigmoid_range():
    arch = MlpArchitecture(2, 1, (8,), "relu", output_activation="sigmoid")
    p = init_xavier(arch, 0)
    y = forward(p, np.random.default_rng(1).normal(size=(1000, 2)) * 10)
    assert np.all((y > 0) & (y < 1))
    # logits beyond ~37 round to exactly 0 or 1 in double precision
    p.weights[-1] *= 1e6
    big = forward(p, [[1e6, -1e6], [-1e6, 1e6]])
    assert np.all(np.isfinite(big)) and np.all((big >= 0) & (big <= 1))


def test_shape_errors():
    p = init_xavier(MlpArchitecture(3, 1, (4,)), 0)
    with pytest.raises(InvalidArgumentError):
        forward(p, [1.0, 2.0])
    with pytest.raises(InvalidArgumentError):
        forward_backward(p, np.zeros((4, 3)), np.zeros((4, 2)))


def test_zero_upstream_gives_zero_grads():
    p = init_xavier(MlpArchitecture(3, 2, (6, 6)), 0)
    _, g = forward_backward(p, np.ones((5, 3)), np.zeros((5, 2)))
    assert np.all(g.flat() == 0)


def test_batch_linearity():
    p = init_xavier(MlpArchitecture(3, 2, (6, 6)), 3)
    x = np.array([[0.3, -0.2, 0.9]])
    up = np.array([[1.0, -0.5]])
    _, g1 = forward_backward(p, x, up)
    _, g2 = forward_backward(p, np.repeat(x, 2, axis=0), np.repeat(up, 2, axis=0))
    # fused multiply-add inside BLAS may round the pair sum once
    np.testing.assert_allclose(g2.flat(), 2 * g1.flat(), rtol=1e-15, atol=1e-300)


@pytest.mark.parametrize("which", ["dual", "primal"])
def test_gradients_match_finite_differences(which):
    cfg = TrainConfig()
    rng = np.random.default_rng(17)
    errs = [gradient_check(which, cfg, D, rng) for D in (1, 2, 3) for _ in range(5)]
    assert max(errs) < 1e-5


def test_adam_zero_gradient_is_noop():
    p = init_xavier(MlpArchitecture(2, 1, (3,)), 0)
    before = p.flat().copy()
    st = AdamState.for_params(p, lr=0.01)
    adam_step(st, p, p.zeros_like())
    np.testing.assert_array_equal(p.flat(), before)
    assert st.t == 1


def _scalar_net(theta):
    arch = MlpArchitecture(1, 1, (1,))
    p = zero_params(arch)
    p.biases[-1][0] = theta
    return p


def test_adam_first_step_by_hand():
    p = _scalar_net(1.0)
    st = AdamState.for_params(p, lr=0.01)
    g = p.zeros_like()
    g.biases[-1][0] = 2.0
    adam_step(st, p, g)
    assert p.biases[-1][0] == pytest.approx(1.0 - 0.01 * 2.0 / (2.0 + 1e-8), abs=1e-15)
    adam_step(st, p, g)
    # constant gradient: bias-corrected moments stay at g and g^2
    assert p.biases[-1][0] == pytest.approx(1.0 - 2 * 0.01, abs=1e-9)
    assert all(np.all(v >= 0) for v in st.v)


def test_adam_rejects_non_finite():
    p = _scalar_net(1.0)
    g = p.zeros_like()
    g.biases[-1][0] = np.nan
    with pytest.raises(TrainingDivergenceError, match="stage 4"):
        adam_step(AdamState.for_params(p), p, g, stage=4)


def test_piecewise_lr():
    lr = piecewise_lr(100)
    assert lr(0) == 1e-3 and lr(59) == 1e-3 and lr(60) == 1e-4 and lr(10**6) == 1e-4
    with pytest.raises(InvalidArgumentError):
        piecewise_lr(10, (1e-3,), (0.5,))


def test_checkpoint_round_trip():
    arch = MlpArchitecture(3, 2, (5, 4), "bounded_relu", 50.0)
    p = init_xavier(arch, 4)
    p.biases[0][:] = np.arange(5)
    blob = params_to_bytes(p) + params_to_bytes(p)
    assert blob[:4] == b"DMNN"
    q, off = params_from_bytes(blob)
    r, end = params_from_bytes(blob, off)
    assert end == len(blob)
    assert q.arch == arch
    np.testing.assert_array_equal(q.flat(), p.flat())
    np.testing.assert_array_equal(r.flat(), p.flat())
    with pytest.raises(InvalidArgumentError):
        params_from_bytes(b"XXXX" + blob[4:])


def test_training_determinism():
    arch = MlpArchitecture(2, 1, (8, 8))
    x = np.random.default_rng(0).normal(size=(64, 2))

    def run():
        p = init_xavier(arch, 5)
        st = AdamState.for_params(p, lr=1e-2)
        for _ in range(20):
            y, g = forward_backward(p, x, np.ones((64, 1)) / 64)
            adam_step(st, p, g)
        return p.flat()

    np.testing.assert_array_equal(run(), run())
