from __future__ import annotations

import numpy as np
import pytest

from metastack import autodiff as ad
from metastack import nn
from metastack.autodiff import Tape, Tensor
from metastack.learners import (
    DivergenceError,
    LearnerParams,
    hypernetwork_meta_grad,
    inner_adapt,
    instantiate,
    loss_and_grad,
    make_hypernetwork,
    surrogate_loss,
    surrogate_tensor,
    task_loss,
)
from metastack.nn import Mlp
from metastack.tasks import Dataset, PolynomialDomain


def scalar_model(w=0.0, b=0.0):
    return Mlp([1, 1], ["identity"], [np.array([[w]]), np.array([b])])


def test_init_mode_shares_weights():
    lp = LearnerParams(Mlp.init([1, 4, 1], "tanh", np.random.default_rng(0)))
    dom = PolynomialDomain()
    rng = np.random.default_rng(1)
    a, b = instantiate(lp, dom.sample_task(rng, 0)), instantiate(lp, dom.sample_task(rng, 1))
    assert np.array_equal(a.flat(), b.flat())
    a.params[0][0, 0] += 1.0
    assert not np.array_equal(a.flat(), lp.init.flat())


def test_zero_hypernetwork_gives_zero_model():
    model = Mlp.init([1, 4, 1], "tanh", np.random.default_rng(0))
    hyper = make_hypernetwork(3, model, np.random.default_rng(1))
    hyper = hyper.with_params([np.zeros_like(p) for p in hyper.params])
    lp = LearnerParams(model, mode="hypernetwork", hyper=hyper)
    out = instantiate(lp, PolynomialDomain().sample_task(np.random.default_rng(2), 0))
    assert np.all(out.flat() == 0)


def test_hypernetwork_shape_checks():
    model = Mlp.init([1, 4, 1], "tanh", np.random.default_rng(0))
    with pytest.raises(ValueError):
        LearnerParams(model, mode="hypernetwork", hyper=Mlp.init([3, 5], "tanh", np.random.default_rng(1)))
    with pytest.raises(ValueError):
        LearnerParams(model, mode="hypernetwork")


def test_hypernetwork_meta_grad_matches_fd():
    rng = np.random.default_rng(3)
    model = Mlp.init([1, 3, 1], "tanh", rng)
    hyper = make_hypernetwork(3, model, rng, hidden=4, gain=0.5)
    lp = LearnerParams(model, mode="hypernetwork", hyper=hyper)
    task = PolynomialDomain().sample_task(rng, 0)
    data = PolynomialDomain().dataset(task, rng, 8)
    _, mg = loss_and_grad(instantiate(lp, task), data)
    analytic = hypernetwork_meta_grad(lp, task, mg)
    numeric = ad.fd_gradient(lambda ps: task_loss(instantiate(lp.with_meta_params(ps), task), data), hyper.params, 1e-6)
    assert ad.max_relative_error(analytic, numeric, floor=1e-6) < 1e-5


def test_task_loss_examples():
    data = Dataset(np.array([[0.0], [1.0]]), np.array([[2.0], [2.0]]))
    assert task_loss(scalar_model(), data) == 4.0
    assert task_loss(scalar_model(0.0, 2.0), data) == 0.0
    with pytest.raises(ValueError):
        task_loss(scalar_model(), Dataset(np.zeros((0, 1)), np.zeros((0, 1))))


def test_inner_adapt_examples():
    data = Dataset(np.array([[0.0]]), np.array([[1.0]]))
    lp = LearnerParams(scalar_model(), alpha=0.1, steps=0)
    assert np.array_equal(inner_adapt(lp, lp.init, data).model.flat(), lp.init.flat())
    lp = LearnerParams(scalar_model(), alpha=0.1, steps=1)
    out = inner_adapt(lp, lp.init, data)
    assert out.model.params[1][0] == pytest.approx(0.2)
    assert np.allclose(out.grad_sum[1], [-2.0])


def test_inner_adapt_leaves_init_untouched():
    lp = LearnerParams(Mlp.init([1, 4, 1], "tanh", np.random.default_rng(0)), steps=3)
    before = lp.init.flat().copy()
    data = PolynomialDomain().dataset(PolynomialDomain().sample_task(np.random.default_rng(1), 0), np.random.default_rng(2))
    inner_adapt(lp, lp.init, data)
    assert np.array_equal(before, lp.init.flat())


def test_inner_adapt_divergence():
    model = Mlp.init([1, 16, 16, 1], "relu", np.random.default_rng(0), gain=3.0)
    lp = LearnerParams(model, alpha=1e4, steps=20)
    data = Dataset(np.linspace(-2, 2, 10), 100 * np.linspace(-2, 2, 10) ** 2)
    with np.errstate(all="ignore"), pytest.raises(DivergenceError):
        inner_adapt(lp, lp.init, data)


def test_surrogate_reduces_to_mse():
    rng = np.random.default_rng(0)
    m = Mlp.init([1, 4, 1], "tanh", rng)
    data = Dataset(rng.normal(size=(5, 1)), rng.normal(size=(5, 1)))
    assert surrogate_loss(None, m, data, 0.0) == pytest.approx(task_loss(m, data))
    assert surrogate_loss(None, m, data, 1.0) > task_loss(m, data)
    with pytest.raises(ValueError):
        surrogate_loss(None, m, data, -1.0)


def test_surrogate_bias_only_model():
    # zero weights: only the output bias has a nonzero output sensitivity (d f / d b = 1)
    m = Mlp([1, 2, 1], ["tanh", "identity"], [np.zeros((1, 2)), np.zeros(2), np.zeros((2, 1)), np.array([0.3])])
    data = Dataset(np.ones((4, 1)), np.zeros((4, 1)))
    extra = surrogate_loss(None, m, data, 1.0) - task_loss(m, data)
    assert extra == pytest.approx(1.0)


def test_surrogate_gradient_check():
    rng = np.random.default_rng(5)
    m = Mlp.init([2, 5, 1], "tanh", rng)
    data = Dataset(rng.normal(size=(6, 2)), rng.normal(size=(6, 1)))
    tape = Tape()
    leaves = tape.leaves(m.params)
    analytic = ad.backward(tape, surrogate_tensor(leaves, m.activations, data, 0.7), leaves)
    numeric = ad.fd_gradient(lambda ps: surrogate_tensor([Tensor(p) for p in ps], m.activations, data, 0.7).item(), m.params, 1e-6)
    assert ad.max_relative_error(analytic, numeric, floor=1e-6) < 1e-4


def test_extra_virtual_data_enters_inner_loop():
    rng = np.random.default_rng(6)
    lp = LearnerParams(Mlp.init([1, 4, 1], "tanh", rng), steps=2)
    data = Dataset(rng.normal(size=(5, 1)), rng.normal(size=(5, 1)))
    virt = Dataset(rng.normal(size=(5, 1)), rng.normal(size=(5, 1)))
    plain = inner_adapt(lp, lp.init, data)
    zero_w = inner_adapt(lp, lp.init, data, extra=[(0.0, virt)])
    with_v = inner_adapt(lp, lp.init, data, extra=[(0.5, virt)])
    assert np.array_equal(plain.model.flat(), zero_w.model.flat())
    assert not np.array_equal(plain.model.flat(), with_v.model.flat())
    assert len(with_v.extra_grad_sums) == 1


def test_learner_validation():
    m = scalar_model()
    for kw in ({"alpha": 0.0}, {"steps": -1}, {"mode": "lstm"}, {"inner_loss": "huber"}):
        with pytest.raises(ValueError):
            LearnerParams(m, **kw)


def test_predict_is_pure_numpy_equivalent():
    m = Mlp.init([2, 3, 1], "tanh", np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(4, 2))
    assert np.array_equal(nn.predict(m, x), nn.apply([Tensor(p) for p in m.params], m.activations, x).data)
