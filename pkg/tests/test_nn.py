from __future__ import annotations

import numpy as np
import pytest

from metastack import autodiff as ad
from metastack import nn
from metastack.autodiff import Tape
from metastack.nn import Mlp, Optimizer


def test_identity_layer():
    m = Mlp([2, 2], ["identity"], [np.eye(2), np.zeros(2)])
    assert np.array_equal(nn.predict(m, np.array([[1.0, 2.0]])), [[1.0, 2.0]])


def test_tanh_layer_hand_value():
    m = Mlp([1, 1], ["tanh"], [np.array([[2.0]]), np.array([1.0])])
    assert nn.predict(m, np.array([[0.0]]))[0, 0] == pytest.approx(0.76159, abs=1e-5)


def test_softmax_head_uniform():
    m = Mlp([2, 3], ["softmax"], [np.zeros((2, 3)), np.zeros(3)])
    assert np.allclose(nn.predict(m, np.ones((1, 2))), 1 / 3)


def test_width_mismatch_raises():
    m = Mlp.init([3, 4, 1], "tanh", np.random.default_rng(0))
    with pytest.raises(ValueError):
        nn.predict(m, np.ones((2, 2)))


def test_bad_shapes_rejected():
    with pytest.raises(ValueError):
        Mlp([2, 2], ["tanh"], [np.zeros((3, 2)), np.zeros(2)])
    with pytest.raises(ValueError):
        Mlp([2, 2], ["swish"], [np.zeros((2, 2)), np.zeros(2)])


def test_init_head_is_linear_and_deterministic():
    a = Mlp.init([1, 8, 1], "tanh", np.random.default_rng(5))
    b = Mlp.init([1, 8, 1], "tanh", np.random.default_rng(5))
    assert a.activations == ["tanh", "identity"]
    assert np.array_equal(a.flat(), b.flat())


def test_flatten_roundtrip():
    m = Mlp.init([2, 3, 2], "tanh", np.random.default_rng(1))
    back = m.unflatten(m.flat())
    assert all(np.array_equal(p, q) for p, q in zip(back, m.params))
    assert m.flat().size == m.n_params


def test_forward_with_tape_returns_leaves():
    m = Mlp.init([2, 3, 1], "tanh", np.random.default_rng(2))
    out, leaves = nn.forward(m, np.ones((4, 2)), Tape())
    assert out.shape == (4, 1) and len(leaves) == 4


def test_output_sum_param_grad_matches_backward():
    rng = np.random.default_rng(4)
    m = Mlp.init([2, 5, 3], "tanh", rng)
    x = rng.normal(size=(6, 2))
    cot = rng.normal(size=(6, 3))
    built = [g.data for g in nn.output_sum_param_grad([ad.Tensor(p) for p in m.params], m.activations, x, cot)]
    tape = Tape()
    leaves = tape.leaves(m.params)
    ref = ad.backward(tape, ad.tsum(nn.apply(leaves, m.activations, x) * cot), leaves)
    assert ad.max_relative_error(built, ref) < 1e-12


def test_sgd_step():
    (p,) = Optimizer("sgd", 0.1).step([np.array(1.0)], [np.array(2.0)])
    assert p == pytest.approx(0.8)


def test_zero_gradient_leaves_params():
    for kind in ("sgd", "adam"):
        (p,) = Optimizer(kind, 0.1).step([np.array([1.0, -2.0])], [np.zeros(2)])
        assert np.array_equal(p, [1.0, -2.0])


def test_adam_first_step_moves_by_lr():
    (p,) = Optimizer("adam", 0.01).step([np.array(1.0)], [np.array(1.0)])
    assert 1.0 - p == pytest.approx(0.01, rel=1e-6)


def test_optimizer_does_not_mutate_inputs():
    params = [np.ones(3)]
    Optimizer("adam", 0.1).step(params, [np.ones(3)])
    assert np.array_equal(params[0], np.ones(3))


def test_optimizer_state_roundtrip():
    opt = Optimizer("adam", 0.05)
    p = [np.ones(2)]
    for _ in range(3):
        p = opt.step(p, [np.array([0.3, -0.1])])
    clone = Optimizer.from_state(opt.state_dict())
    assert np.array_equal(opt.step(p, [np.ones(2)])[0], clone.step(p, [np.ones(2)])[0])


def test_optimizer_validation():
    with pytest.raises(ValueError):
        Optimizer("rmsprop")
    with pytest.raises(ValueError):
        Optimizer("sgd", 0.0)
    with pytest.raises(ValueError):
        Optimizer("sgd").step([np.ones(2)], [np.ones(3)])
