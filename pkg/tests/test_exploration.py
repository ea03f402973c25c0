from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metastack import autodiff as ad
from metastack import nn
from metastack.autodiff import Tape
from metastack.exploration import (
    Discriminator,
    ExplorationParams,
    Generator,
    VirtualScorer,
    delta_loss,
    discriminator_loss,
    discriminator_update,
    entropy_signal,
    explore_round,
    generator_loss,
    generator_step,
    grad_norm_signal,
    kernel_refs,
    score_hard,
    score_kernel,
    score_smooth,
)
from metastack.learners import LearnerParams, inner_adapt, task_loss
from metastack.nn import Mlp
from metastack.tasks import Dataset, PolynomialDomain, Task, TaskHistory


def ep(**kw):
    base = dict(lam_mix=0.5, delta=0.1, eps1=0.5, eps2=0.5, alpha1=-0.1, alpha2=-0.1)
    base.update(kw)
    return ExplorationParams(**base)


def test_delta_loss():
    t0, t1 = Task(0, "x", None, np.zeros(1)), Task(1, "x", None, np.ones(1))
    losses = {0: 0.2, 1: 1.2}
    assert delta_loss(lambda t: losses[t.id], t0, t1) == pytest.approx(1.0)
    assert delta_loss(lambda t: losses[t.id], t0, t0) == 0.0


def test_hard_score_examples():
    assert score_hard(ep(lam_mix=1.0), 1.2, 0.5).total == pytest.approx(1.5)
    assert score_hard(ep(lam_mix=0.0), 0.0, 2.0).total == pytest.approx(1.5)
    assert score_hard(ep(), 0.0, 0.0).total == pytest.approx(-0.1)


def test_smooth_score_examples():
    # t - eps - alpha = 0 gives alpha + ln 2
    p = ep(lam_mix=1.0, eps1=0.0, alpha1=-0.1)
    assert score_smooth(p, -0.1 * 0.1, 0.0).term1 == pytest.approx(-0.1 + math.log(2))
    far = ep(lam_mix=1.0, eps1=0.0, alpha1=-0.1, delta=1.0)
    dl = 29.9
    assert abs(score_smooth(far, dl, 0.0).total - score_hard(far, dl, 0.0).total) < 1e-12


@settings(max_examples=200, deadline=None)
@given(st.floats(-5, 5), st.floats(0, 5), st.floats(0, 1))
def test_smooth_upper_bounds_hard(dl, d, lam):
    p = ep(lam_mix=lam)
    gap = score_smooth(p, dl, d).total - score_hard(p, dl, d).total
    assert 0 <= gap <= math.log(2) + 1e-12
    # strict unless every mixed term is so far above its floor that softplus(x) - x underflows
    if lam < 1:
        assert gap > 0


def test_negative_distance_rejected():
    with pytest.raises(ValueError):
        score_hard(ep(), 0.0, -1.0)


def test_vectorised_scores():
    out = score_smooth(ep(), np.array([0.0, 1.0]), np.array([0.5, 0.5]))
    assert out.total.shape == (2,)


def test_param_validation():
    with pytest.raises(ValueError):
        ExplorationParams(lam_mix=1.5)
    with pytest.raises(ValueError):
        ExplorationParams(alpha1=0.1)
    with pytest.raises(ValueError):
        ExplorationParams(eps1=0.5, alpha1=-0.1).check_floors_below_thresholds()


def history_of(points, losses):
    h = TaskHistory()
    for i, (p, l) in enumerate(zip(points, losses)):
        h.append(Task(i, "x", None, np.asarray(p, dtype=float)), l, 0)
    return h


def test_kernel_refs_examples():
    h = history_of([[1.0, 0.0]], [0.7])
    r = kernel_refs(h, np.zeros(2), 1.0)
    assert r.loss_ref == pytest.approx(0.7) and r.dist_ref == pytest.approx(1.0)
    h2 = history_of([[1.0, 0.0], [0.0, 3.0]], [0.2, 0.8])
    flat = kernel_refs(h2, np.zeros(2), 1e-12)
    assert flat.loss_ref == pytest.approx(0.5) and flat.dist_ref == pytest.approx(2.0)
    near = kernel_refs(history_of([[0.0, 0.0], [10.0, 0.0]], [0.1, 5.0]), np.zeros(2), 10.0)
    assert near.loss_ref == pytest.approx(0.1)
    with pytest.raises(ValueError):
        kernel_refs(TaskHistory(), np.zeros(2), 1.0)


def test_kernel_score_floor_region():
    # L equal to the reference and a tiny spread: both terms sit near their floors
    p = ep(eps1=0.5, eps2=0.5, alpha1=-1.0, alpha2=-1.0)
    h = history_of([[0.0, 0.0]], [0.4])
    out = score_kernel(p, h, np.zeros(2), 0.4)
    assert out.term1 == pytest.approx(-1.0 + math.log1p(math.exp(0.5)))
    assert out.term2 == pytest.approx(-1.0 + math.log1p(math.exp(0.5)))


def test_entropy_signal():
    uniform = Mlp([1, 2], ["softmax"], [np.zeros((1, 2)), np.zeros(2)])
    assert entropy_signal(uniform, np.ones((3, 1))) == pytest.approx(math.log(2))
    onehot = Mlp([1, 2], ["softmax"], [np.zeros((1, 2)), np.array([800.0, 0.0])])
    assert entropy_signal(onehot, np.ones((3, 1))) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        entropy_signal(Mlp.init([1, 2], "tanh", np.random.default_rng(0)), np.ones((1, 1)))


def test_grad_norm_near_zero_at_minimum():
    x = np.linspace(-1, 1, 8).reshape(-1, 1)
    y = 2 * x + 1
    m = Mlp([1, 1], ["identity"], [np.array([[0.0]]), np.array([0.0])])
    opt = nn.Optimizer("sgd", 0.3)
    from metastack.learners import loss_and_grad

    for _ in range(500):
        _, g = loss_and_grad(m, Dataset(x, y))
        m = m.with_params(opt.step(m.params, g))
    assert grad_norm_signal(m, x, y) < 1e-8
    assert grad_norm_signal(Mlp([1, 1], ["identity"], [np.zeros((1, 1)), np.zeros(1)]), x, y) > 0.1


def test_generator_objective_reductions():
    scores = np.array([0.2, 0.4])
    assert generator_loss(ExplorationParams(), scores, None, np.array([0.5, 0.5])).item() == pytest.approx(-0.3)
    with_gamma = generator_loss(ExplorationParams(gamma=2.0), scores, None, np.array([0.5, 0.5])).item()
    assert with_gamma == pytest.approx(-0.3 + 2.0 * math.log(2))
    with pytest.raises(ValueError):
        generator_loss(ExplorationParams(), scores, None, np.array([0.0, 0.5]))
    with pytest.raises(ValueError):
        generator_loss(ExplorationParams(), np.array([]), None, np.array([0.5]))


def test_perfect_discriminator_loss_is_small():
    dom = PolynomialDomain()
    mlp = Mlp([3, 1], ["identity"], [np.array([[1.0], [0.0], [0.0]]) * 40, np.zeros(1)])
    disc = Discriminator(mlp, dom.lo, dom.hi)
    real, fake = np.array([[1.0, 0, 0]]), np.array([[-1.0, 0, 0]])
    tape = Tape()
    leaves = tape.leaves(mlp.params)
    loss = discriminator_loss(disc, real, fake, leaves)
    grads = ad.backward(tape, loss, leaves)
    assert loss.item() < 1e-15
    assert max(float(np.max(np.abs(g))) for g in grads) < 1e-15


def test_discriminator_on_identical_distributions_tends_to_half():
    dom = PolynomialDomain()
    rng = np.random.default_rng(0)
    disc = Discriminator.init(dom, rng, hidden=8)
    opt = nn.Optimizer("adam", 0.01)
    for _ in range(300):
        batch = rng.uniform(-1, 1, size=(16, 3))
        disc, _ = discriminator_update(disc, batch, batch, opt=opt)
    probe = rng.uniform(-1, 1, size=(50, 3))
    assert np.max(np.abs(disc.prob(probe) - 0.5)) < 0.05


def test_zero_generator_decodes_box_centre():
    dom = PolynomialDomain(a=(0.0, 2.0))
    gen = Generator.init(dom, np.random.default_rng(0))
    gen = Generator(gen.mlp.with_params([np.zeros_like(p) for p in gen.mlp.params]), gen.lo, gen.hi)
    _, params = gen.decode(gen.sample_latents(np.random.default_rng(1), 5))
    assert np.allclose(params.data, [[1.0, 0.0, 0.0]] * 5)


def test_decode_clamps_to_box():
    dom = PolynomialDomain()
    gen = Generator.init(dom, np.random.default_rng(0), gain=20.0)
    raw, clamped = gen.decode(gen.sample_latents(np.random.default_rng(1), 64))
    assert np.any(np.abs(raw.data) > 1)
    assert np.all((clamped.data >= gen.lo) & (clamped.data <= gen.hi))


def make_scorer(signal="smooth", seed=0):
    rng = np.random.default_rng(seed)
    dom = PolynomialDomain()
    lp = LearnerParams(Mlp.init([1, 8, 1], "tanh", rng), steps=2)
    hist = TaskHistory()
    for i in range(5):
        t = dom.sample_task(rng, i)
        hist.append(t, task_loss(inner_adapt(lp, lp.init, dom.dataset(t, rng)).model, dom.dataset(t, rng)), 0)
    return dom, lp, VirtualScorer(lp, dom, ExplorationParams(), hist, signal)


def test_fixed_seed_same_virtual_batch():
    dom, _, scorer = make_scorer()
    gen = Generator.init(dom, np.random.default_rng(3))
    a = explore_round(gen, scorer, np.random.default_rng(9), 4)
    b = explore_round(gen, scorer, np.random.default_rng(9), 4)
    assert np.array_equal(a.params, b.params) and np.array_equal(a.scores, b.scores)


@pytest.mark.parametrize("signal", ["smooth", "hard", "kernel", "grad_norm"])
def test_score_is_differentiable_in_task(signal):
    dom, _, scorer = make_scorer(signal)
    p0 = np.array([0.3, -0.2, 0.5])

    def f(p):
        return scorer.score(ad.as_tensor(p), np.random.default_rng(4), -1)[0]

    tape = Tape()
    (leaf,) = tape.leaves([p0])
    (g,) = ad.backward(tape, f(leaf), [leaf])
    # the adapted weights are held fixed, so finite differences must hold them fixed too
    model, _ = scorer.adapted_model(p0, np.random.default_rng(4), -1)
    frozen = VirtualScorer(LearnerParams(model, steps=0), dom, scorer.ep, scorer.history, signal, "pre")
    num = ad.fd_gradient(lambda ps: frozen.score(ad.Tensor(ps[0]), np.random.default_rng(4), -1)[0].item(), [p0], 1e-6)
    assert ad.max_relative_error([g], num, floor=1e-6) < 1e-4


def test_contextual_score_needs_history():
    dom, lp, _ = make_scorer()
    scorer = VirtualScorer(lp, dom, ExplorationParams(), TaskHistory())
    with pytest.raises(ValueError):
        scorer.score(ad.as_tensor(np.zeros(3)), np.random.default_rng(0))


def test_generator_step_freezes_learner_and_updates_generator():
    dom, lp, scorer = make_scorer()
    gen = Generator.init(dom, np.random.default_rng(1), hidden=8)
    before = lp.init.flat().copy()
    step = generator_step(gen, scorer, scorer.ep, np.random.default_rng(2), 4, nn.Optimizer("adam", 1e-2))
    assert np.array_equal(before, lp.init.flat())
    assert not np.array_equal(step.generator.mlp.flat(), gen.mlp.flat())
    assert step.grad_norm > 0 and math.isnan(step.d_fake_mean)


def test_zero_lr_generator_is_static():
    dom, _, scorer = make_scorer()
    gen = Generator.init(dom, np.random.default_rng(1), hidden=8)
    opt = nn.Optimizer("sgd", 1e-300)
    step = generator_step(gen, scorer, scorer.ep, np.random.default_rng(2), 3, opt)
    assert np.allclose(step.generator.mlp.flat(), gen.mlp.flat(), rtol=0, atol=1e-200)
