"""Gradient checks of every differentiable component against central finite differences."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tape, Tensor
from .constraints import SelectorWeights, SoftConstraint, StructuralModule, equivariance_penalty, gate_tensor
from .exploration import (
    Discriminator,
    ExplorationParams,
    discriminator_loss,
    grad_norm_tensor,
    score_kernel_tensor,
    score_tensor,
    task_manifold_penalty,
)
from .learners import surrogate_tensor, task_loss_tensor
from .nn import Mlp
from .tasks import Dataset, PlanarDomain, PolynomialDomain

TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def check(fn: Callable[[Sequence[Tensor]], Tensor], params: Sequence[np.ndarray], step: float = 1e-6) -> float:
    """Max relative error between the tape gradient of ``fn`` and central differences."""
    tape = Tape()
    leaves = tape.leaves(params)
    analytic = ad.backward(tape, fn(leaves), leaves)
    numeric = ad.fd_gradient(lambda ps: fn([Tensor(p) for p in ps]).item(), params, step)
    return ad.max_relative_error(analytic, numeric, floor=1e-6)


def _cases(rng: np.random.Generator) -> list[tuple[str, Callable, list[np.ndarray]]]:
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))
    pos = rng.uniform(0.5, 2.0, size=(3, 4))
    cases: list[tuple[str, Callable, list[np.ndarray]]] = [
        ("add_mul_div", lambda p: ad.tsum((p[0] * p[1] + p[0]) / (p[1] * p[1] + 1.0)), [a, rng.normal(size=(3, 4))]),
        ("broadcast", lambda p: ad.tsum(ad.square(p[0] - p[1])), [a, rng.normal(size=(4,))]),
        ("matmul", lambda p: ad.tsum(ad.tanh(ad.matmul(p[0], p[1]))), [a, b]),
        ("exp_log_sqrt", lambda p: ad.tsum(ad.log(p[0]) + ad.sqrt(p[0]) * ad.exp(-p[0])), [pos]),
        ("power", lambda p: ad.tsum(ad.power(p[0], 1.5)), [pos]),
        ("trig", lambda p: ad.tsum(ad.cos(p[0]) * ad.sin(2.0 * p[0])), [a]),
        ("sigmoid_softplus", lambda p: ad.tsum(ad.sigmoid(p[0]) + ad.softplus(3.0 * p[0]) + ad.log_sigmoid(p[0])), [a]),
        ("abs", lambda p: ad.tsum(ad.abs_(p[0])), [a + np.sign(a) * 0.1]),
        ("softmax", lambda p: ad.tsum(ad.softmax(p[0]) * np.arange(4.0)), [a]),
        ("norm", lambda p: ad.norm(p[0]), [a]),
        ("mean_reshape_transpose", lambda p: ad.mean(ad.transpose(ad.reshape(p[0], (4, 3))) * 2.0), [a]),
        ("index_concat_stack", lambda p: ad.tsum(ad.stack([ad.concat([p[0][0], p[0][2]]), ad.concat([p[0][1], p[0][1]])]) ** 2), [a]),
    ]
    mlp = Mlp.init([2, 8, 8, 1], "tanh", rng)
    x, y = rng.normal(size=(6, 2)), rng.normal(size=(6, 1))
    data = Dataset(x, y)
    cases.append(("mlp_mse", lambda p: task_loss_tensor(p, mlp.activations, data), mlp.params))
    cases.append(("surrogate_grad_penalty", lambda p: surrogate_tensor(p, mlp.activations, data, 0.5), mlp.params))
    emb = rng.normal(size=3)
    cases.append(("selector_gate", lambda p: ad.tsum(gate_tensor(p[0], p[1], emb) * np.array([1.0, -2.0])), [rng.normal(size=(2, 3)), rng.normal(size=2)]))
    pm = Mlp.init([2, 6, 2], "tanh", rng)
    rot = StructuralModule("rotation_SO2")
    pts, els = rng.normal(size=(5, 2)), rot.sample_elements(rng, 3)
    cases.append(("equivariance_penalty", lambda p: equivariance_penalty(rot, pm, pts, els, p), pm.params))
    ep = ExplorationParams(lam_mix=0.4)
    cases.append(("score_smooth", lambda p: ad.tsum(score_tensor(ep, p[0], p[1])[2]), [rng.normal(size=5), rng.uniform(0.2, 2.0, size=5)]))
    hist_emb, hist_loss = rng.normal(size=(6, 3)), rng.uniform(0.1, 1.0, size=6)
    cases.append(("score_kernel", lambda p: score_kernel_tensor(ep, hist_emb, hist_loss, p[0], p[1])[2], [rng.normal(size=3), np.array(0.7)]))
    dom = PolynomialDomain()
    probe = dom.probe(rng, 8)
    lin = Mlp.init([1, 6, 1], "tanh", rng)

    def build_loss(p):
        xq, yq = dom.build(p[0], probe)
        return ad.mean(ad.square(nn.apply([Tensor(q) for q in lin.params], lin.activations, xq) - yq))

    cases.append(("task_build_loss", build_loss, [rng.uniform(-1, 1, size=3)]))
    cases.append(("grad_norm_signal", lambda p: grad_norm_tensor(lin, dom.build(p[0], probe)[0], dom.build(p[0], probe)[1]), [rng.uniform(-1, 1, size=3)]))
    planar = PlanarDomain()
    sc = SoftConstraint([rot, StructuralModule("translation_R2")], SelectorWeights(rng.normal(size=(2, 2)), rng.normal(size=2)))
    mels = [m.sample_elements(rng, 2) for m in sc.modules]
    cpts = rng.normal(size=(4, 2))
    cases.append(("task_manifold_penalty", lambda p: task_manifold_penalty(sc, planar, p[0], cpts, mels), [np.array([1.1, 0.7])]))
    disc = Discriminator(Mlp.init([3, 6, 6, 1], "tanh", rng), dom.lo, dom.hi)
    real, fake = rng.uniform(-1, 1, size=(4, 3)), rng.uniform(-1, 1, size=(4, 3))
    cases.append(("discriminator_loss", lambda p: discriminator_loss(disc, real, fake, p), disc.mlp.params))
    return cases


@contextlib.contextmanager
def broken_derivative(op: str) -> Iterator[None]:
    """Test hook: temporarily replace ``op``'s backward rule with a wrong one."""
    original = getattr(ad, op)

    def bad(a):
        a = ad.as_tensor(a)
        out = original(a)
        return ad._make(out.data, (a,), lambda g: (g * 1.5,), op)

    setattr(ad, op, bad)
    try:
        yield
    finally:
        setattr(ad, op, original)


def run_gradchecks(seed: int = 0, broken: str | None = None) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    ctx = broken_derivative(broken) if broken else contextlib.nullcontext()
    with ctx:
        return [CheckResult(name, check(fn, params)) for name, fn, params in _cases(rng)]
