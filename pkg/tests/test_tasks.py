from __future__ import annotations

import numpy as np
import pytest

from metastack import autodiff as ad
from metastack.tasks import (
    Dataset,
    GameDomain,
    PlanarDomain,
    PolynomialDomain,
    PolynomialPrior,
    Task,
    TaskHistory,
    generate_dataset,
    make_domain,
    sample_polynomial_task,
    select_reference,
    task_distance,
)


def poly_task(a, b, c, noise=0.0, n=20):
    return PolynomialDomain(noise=noise, n=n).make_task([a, b, c], 0)


def test_collapsed_prior_gives_fixed_task():
    t = sample_polynomial_task(np.random.default_rng(0), PolynomialPrior(a=(1, 1), b=(0, 0), c=(0, 0)))
    assert (t.payload.a, t.payload.b, t.payload.c) == (1.0, 0.0, 0.0)


def test_same_seed_same_task():
    prior = PolynomialPrior()
    t1 = sample_polynomial_task(np.random.default_rng(4), prior)
    t2 = sample_polynomial_task(np.random.default_rng(4), prior)
    assert np.array_equal(t1.embedding, t2.embedding)


def test_empty_prior_range_rejected():
    with pytest.raises(ValueError):
        sample_polynomial_task(np.random.default_rng(0), PolynomialPrior(a=(1, 0)))


def test_constant_and_quadratic_targets():
    d = generate_dataset(poly_task(0, 0, 5), np.random.default_rng(0))
    assert np.all(d.y == 5.0)
    dom = PolynomialDomain()
    y = dom.target_fn(np.array([1.0, 0.0, 0.0]), np.array([[2.0]])).data
    assert y[0, 0] == 4.0


def test_noise_variance_monte_carlo():
    d = generate_dataset(poly_task(0, 0, 0, noise=0.1, n=10000), np.random.default_rng(1))
    assert 0.008 <= d.y.var() <= 0.012


def test_dataset_validation():
    with pytest.raises(ValueError):
        Dataset(np.ones((3, 1)), np.ones((2, 1)))
    with pytest.raises(ValueError):
        Dataset(np.array([[np.nan]]), np.ones((1, 1)))


def test_distance_345():
    a = Task(0, "x", None, np.array([0.0, 0.0]))
    b = Task(1, "x", None, np.array([3.0, 4.0]))
    assert task_distance(a, b) == 5.0


def test_distance_dim_mismatch():
    with pytest.raises(ValueError):
        task_distance(Task(0, "x", None, np.zeros(2)), Task(1, "x", None, np.zeros(3)))


def history_at(distances, ids=None):
    h = TaskHistory()
    for i, d in enumerate(distances):
        h.append(Task(ids[i] if ids else i, "x", None, np.array([d, 0.0])), 1.0, 0)
    return h


def test_reference_selection():
    q = Task(99, "x", None, np.zeros(2))
    assert select_reference(history_at([4.0]), q).task.id == 0
    assert select_reference(history_at([2.0, 1.0, 3.0]), q).task.id == 1
    assert select_reference(history_at([-1.0, 1.0], ids=[7, 3]), q).task.id == 3
    with pytest.raises(ValueError):
        select_reference(TaskHistory(), q)


def test_history_cap_and_records():
    dom = PolynomialDomain()
    h = TaskHistory(cap=2)
    for i in range(3):
        h.append(dom.make_task([0.1 * i, 0, 0], i), float(i), i)
    assert list(h.ids()) == [1, 2]
    back = TaskHistory.from_records(h.to_records(), 2)
    assert np.array_equal(back.embeddings(), h.embeddings())
    with pytest.raises(ValueError):
        h.append(dom.make_task([0, 0, 0], 5), float("nan"), 0)


@pytest.mark.parametrize("name", ["polynomial", "planar", "game"])
def test_build_matches_dataset(name):
    dom = make_domain(name)
    rng = np.random.default_rng(2)
    task = dom.sample_task(rng, 0)
    probe = dom.probe(np.random.default_rng(5), 6)
    x, y = dom.build(dom.params_of(task), probe)
    d = dom.dataset(task, np.random.default_rng(5), 6)
    assert np.allclose(x.data, d.x) and np.allclose(y.data, d.y)
    lo, hi = dom.box()
    assert np.all(dom.params_of(task) >= lo) and np.all(dom.params_of(task) <= hi)


def test_box_shrinks_about_centre():
    lo, hi = PolynomialDomain().box(0.5)
    assert np.allclose(lo, -0.5) and np.allclose(hi, 0.5)


def test_planar_targets_rotate_and_scale():
    dom = PlanarDomain()
    y = dom.target_fn(np.array([2.0, np.pi / 2]), np.array([[1.0, 0.0]])).data
    assert np.allclose(y, [[0.0, 2.0]])


def test_embedding_differentiable():
    dom = PlanarDomain()
    tape = ad.Tape()
    (p,) = tape.leaves([np.array([1.0, 0.3])])
    (g,) = ad.backward(tape, ad.tsum(dom.embed(p)), [p])
    assert np.allclose(g, [np.cos(0.3) + np.sin(0.3), -np.sin(0.3) + np.cos(0.3)])


def test_game_domain_targets_are_equilibria():
    dom = GameDomain()
    task = dom.make_task([0.0, 0.0], 0)
    assert dom.game_class(task) == "team"
    assert dom.game_class(dom.make_task([0.5, 0.0], 1)) == "potential"
    assert dom.game_class(dom.make_task([0.5, 0.2], 2)) == "general"
    d = dom.dataset(task, np.random.default_rng(0), 5)
    assert d.x.shape == (5, 8) and d.y.shape == (5, 2)
    assert np.all((d.y >= 0) & (d.y <= 1))
    with pytest.raises(ValueError):
        dom.target_fn(np.zeros(2), np.zeros((1, 8)))


def test_task_record_roundtrip():
    t = PlanarDomain().make_task([1.2, 0.4], 3)
    back = Task.from_record(t.to_record())
    assert back.payload == t.payload and np.array_equal(back.embedding, t.embedding)


def test_unknown_domain():
    with pytest.raises(ValueError):
        make_domain("maze")
