from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metastack import autodiff as ad
from metastack import nn
from metastack.autodiff import NonFiniteError, Tape, Tensor


def grad_of(fn, *values):
    tape = Tape()
    leaves = tape.leaves([np.asarray(v, dtype=np.float64) for v in values])
    return ad.backward(tape, fn(*leaves), leaves)


def test_square_grad_at_three():
    (g,) = grad_of(lambda x: ad.square(x), 3.0)
    assert g == pytest.approx(6.0)


def test_softplus_grad_at_zero():
    (g,) = grad_of(lambda x: ad.softplus(x), 0.0)
    assert g == pytest.approx(0.5)


def test_random_two_layer_mlp_matches_fd():
    rng = np.random.default_rng(0)
    mlp = nn.Mlp.init([3, 5, 2], "tanh", rng)
    x, y = rng.normal(size=(7, 3)), rng.normal(size=(7, 2))

    def loss(ps):
        return ad.mean(ad.square(nn.apply(ps, mlp.activations, x) - y))

    tape = Tape()
    leaves = tape.leaves(mlp.params)
    analytic = ad.backward(tape, loss(leaves), leaves)
    numeric = ad.fd_gradient(lambda ps: loss([Tensor(p) for p in ps]).item(), mlp.params, 1e-5)
    assert ad.max_relative_error(analytic, numeric, floor=1e-6) < 1e-5


def test_fd_gradient_examples():
    (g,) = ad.fd_gradient(lambda ps: float(ps[0] ** 2), [np.array(3.0)], 1e-4)
    assert abs(g - 6.0) < 1e-6
    (g,) = ad.fd_gradient(lambda ps: float(np.sin(ps[0])), [np.array(0.0)], 1e-5)
    assert abs(g - 1.0) < 1e-8
    (g,) = ad.fd_gradient(lambda ps: 4.0, [np.ones(3)])
    assert np.array_equal(g, np.zeros(3))


def test_fd_gradient_rejects_bad_step():
    with pytest.raises(ValueError):
        ad.fd_gradient(lambda ps: 0.0, [np.ones(1)], 0.0)


def test_backward_requires_scalar():
    tape = Tape()
    (x,) = tape.leaves([np.ones(3)])
    with pytest.raises(ValueError):
        ad.backward(tape, x * 2.0, [x])


def test_unused_leaf_gets_zero_grad():
    tape = Tape()
    x, y = tape.leaves([np.ones(2), np.ones(3)])
    gx, gy = ad.backward(tape, ad.tsum(x), [x, y])
    assert np.array_equal(gx, np.ones(2)) and np.array_equal(gy, np.zeros(3))


def test_fan_out_accumulates():
    (g,) = grad_of(lambda x: x * x + x * 3.0, 2.0)
    assert g == pytest.approx(7.0)


def test_broadcast_gradients_are_summed():
    gx, gb = grad_of(lambda x, b: ad.tsum(x + b), np.ones((4, 3)), np.zeros(3))
    assert np.array_equal(gb, np.full(3, 4.0))
    assert gx.shape == (4, 3)


def test_log_of_nonpositive_raises():
    with pytest.raises(NonFiniteError):
        ad.log(Tensor(np.array([-1.0])))


def test_overflow_raises_nonfinite():
    with np.errstate(over="ignore"), pytest.raises(NonFiniteError):
        ad.exp(Tensor(np.array([1000.0])))


def test_clip_straight_through():
    tape = Tape()
    (x,) = tape.leaves([np.array([-2.0, 0.5, 3.0])])
    out = ad.clip_st(x, -1.0, 1.0)
    assert np.array_equal(out.data, [-1.0, 0.5, 1.0])
    (g,) = ad.backward(tape, ad.tsum(out * np.array([1.0, 2.0, 3.0])), [x])
    assert np.array_equal(g, [1.0, 2.0, 3.0])


def test_stop_gradient_blocks():
    (g,) = grad_of(lambda x: x * ad.stop_gradient(x), 3.0)
    assert g == pytest.approx(3.0)


def test_deterministic_forward_backward():
    rng = np.random.default_rng(3)
    w = rng.normal(size=(4, 4))

    def run():
        return grad_of(lambda a: ad.tsum(ad.tanh(ad.matmul(a, a))), w)[0]

    assert np.array_equal(run(), run())


def test_constant_tensors_do_not_record():
    a = Tensor(np.ones(2))
    out = a * 3.0 + 1.0
    assert out.tape is None


@settings(max_examples=40, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3))
def test_elementwise_rules_match_fd(x, y):
    def f(a, b):
        return ad.sin(a) * ad.tanh(b) + ad.sigmoid(a * b) + ad.softplus(a - b)

    analytic = grad_of(f, x, y)
    numeric = ad.fd_gradient(lambda ps: f(Tensor(ps[0]), Tensor(ps[1])).item(), [np.array(x), np.array(y)], 1e-6)
    assert ad.max_relative_error(analytic, numeric, floor=1e-4) < 1e-5


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-20, 20), min_size=2, max_size=6))
def test_softmax_sums_to_one(xs):
    out = ad.softmax(Tensor(np.array(xs))).data
    assert math.isclose(out.sum(), 1.0, rel_tol=0, abs_tol=1e-12)
    assert np.all(out >= 0)


def test_log_sigmoid_is_stable():
    out = ad.log_sigmoid(Tensor(np.array([-800.0, 0.0, 800.0]))).data
    assert out[0] == pytest.approx(-800.0)
    assert out[1] == pytest.approx(-math.log(2))
    assert out[2] == pytest.approx(0.0)
