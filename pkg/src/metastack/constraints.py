"""Soft constraints: symmetry modules, the learned selector gate and gated manifold penalties.

A structural module is a one-parameter family of group actions ``g`` applied
jointly to inputs and outputs. Its penalty measures how far a model is from
equivariance, ``mean ||f(g x) - g f(x)||^2`` over collocation points and sampled
group elements. A sigmoid selector decides, per task embedding, how strongly each
module's penalty (and its virtual data) applies.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .nn import Mlp
from .tasks import Dataset, Task

GROUP_KINDS = ("rotation_SO2", "translation_R2", "scaling")
PRUNE_THRESHOLD = 0.05


class IntractableConstraintError(ValueError):
    """The constraint cannot be sampled directly; use the adversarial generator instead."""


@dataclass
class StructuralModule:
    kind: str
    angle_range: tuple[float, float] = (0.0, 2 * np.pi)
    offset_scale: float = 1.0
    factor_range: tuple[float, float] = (0.5, 2.0)

    def __post_init__(self) -> None:
        lo, hi = self.angle_range
        if not (0.0 <= lo <= hi <= 2 * np.pi):
            raise ValueError("rotation angles must lie in [0, 2*pi)")
        if not (0 < self.factor_range[0] <= self.factor_range[1]):
            raise ValueError("scaling factors must be positive")

    @property
    def tractable(self) -> bool:
        return self.kind in GROUP_KINDS

    @property
    def needs_planar(self) -> bool:
        return self.kind in ("rotation_SO2", "translation_R2")

    def sample_elements(self, rng: np.random.Generator, count: int) -> np.ndarray:
        """Group elements as rows: angle, 2-D offset, or scale factor."""
        if self.kind == "rotation_SO2":
            angles = rng.uniform(*self.angle_range, size=count)
            return np.mod(angles, 2 * np.pi).reshape(-1, 1)
        if self.kind == "translation_R2":
            return rng.normal(0.0, self.offset_scale, size=(count, 2))
        if self.kind == "scaling":
            return rng.uniform(*self.factor_range, size=(count, 1))
        raise IntractableConstraintError(f"module kind {self.kind!r} has no direct sampler")

    def act(self, element: np.ndarray, z):
        """Apply one group element to a batch of row vectors (array or tensor)."""
        element = np.asarray(element, dtype=np.float64).reshape(-1)
        if self.kind == "rotation_SO2":
            c, s = np.cos(element[0]), np.sin(element[0])
            rot_t = np.array([[c, s], [-s, c]])  # R^T, so rows map as x -> R x
            return ad.matmul(z, rot_t) if isinstance(z, Tensor) else np.asarray(z) @ rot_t
        if self.kind == "translation_R2":
            return z + element.reshape(1, 2)
        if self.kind == "scaling":
            return z * float(element[0])
        raise IntractableConstraintError(f"module kind {self.kind!r} has no explicit action")


@dataclass
class SelectorWeights:
    """``s_i(tau) = sigmoid(w_i . phi(tau) + b_i)``; ``weights`` is (modules, m)."""

    weights: np.ndarray
    bias: np.ndarray = None  # type: ignore[assignment]

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ValueError("selector weights must be a (modules, embedding_dim) array")
        if self.bias is None:
            self.bias = np.zeros(self.weights.shape[0])
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise ValueError("selector weights must be finite")

    @classmethod
    def zeros(cls, n_modules: int, embed_dim: int) -> "SelectorWeights":
        return cls(np.zeros((n_modules, embed_dim)), np.zeros(n_modules))

    @property
    def params(self) -> list[np.ndarray]:
        return [self.weights, self.bias]

    def copy(self) -> "SelectorWeights":
        return SelectorWeights(self.weights.copy(), self.bias.copy())


@dataclass
class SoftConstraint:
    modules: list[StructuralModule]
    selector: SelectorWeights
    penalty_weights: np.ndarray = None  # type: ignore[assignment]
    n_points: int = 32
    n_elements: int = 4

    def __post_init__(self) -> None:
        if not self.modules:
            raise ValueError("a soft constraint needs at least one module")
        if self.selector.weights.shape[0] != len(self.modules):
            raise ValueError("one selector row per module required")
        if self.penalty_weights is None:
            self.penalty_weights = np.ones(len(self.modules))
        self.penalty_weights = np.asarray(self.penalty_weights, dtype=np.float64)

    @property
    def tractable(self) -> bool:
        return all(m.tractable for m in self.modules)

    def copy(self) -> "SoftConstraint":
        return SoftConstraint(list(self.modules), self.selector.copy(), self.penalty_weights.copy(), self.n_points, self.n_elements)


def gate_tensor(weights, bias, embedding) -> Tensor:
    emb = ad.as_tensor(embedding)
    w = ad.as_tensor(weights)
    if w.shape[1] != emb.shape[-1]:
        raise ValueError(f"selector expects embedding dim {w.shape[1]}, got {emb.shape[-1]}")
    logits = ad.add(ad.reshape(ad.matmul(w, ad.reshape(emb, (-1, 1))), (-1,)), bias)
    return ad.sigmoid(logits)


def selector_gate(sw: SelectorWeights, task: Task | np.ndarray) -> np.ndarray:
    emb = task.embedding if isinstance(task, Task) else np.asarray(task)
    return gate_tensor(sw.weights, sw.bias, emb).data


def equivariance_penalty(module: StructuralModule, model, points, elements: np.ndarray, params=None) -> Tensor:
    """Mean squared equivariance defect over points and group elements.

    ``model`` is an :class:`Mlp`; pass ``params`` (e.g. taped leaves) to
    differentiate with respect to the weights.
    """
    params = model.params if params is None else params
    in_dim, out_dim = model.widths[0], model.widths[-1]
    if module.needs_planar and (in_dim != 2 or out_dim != 2):
        raise ValueError(f"{module.kind} acts on 2-D data; model maps {in_dim} -> {out_dim}")
    x = np.asarray(points, dtype=np.float64)
    fx = nn.apply(params, model.activations, x)
    defects = []
    for el in elements:
        f_gx = nn.apply(params, model.activations, module.act(el, x))
        defects.append(ad.mean(ad.tsum(ad.square(f_gx - module.act(el, fx)), axis=1)))
    return ad.mean(ad.stack(defects))


def manifold_loss(
    sc: SoftConstraint,
    task: Task,
    model: Mlp,
    points: np.ndarray,
    elements: Sequence[np.ndarray],
    gates=None,
    params=None,
) -> Tensor:
    """``sum_i s_i(task) * weight_i * penalty_i``; non-negative."""
    if gates is None:
        gates = gate_tensor(sc.selector.weights, sc.selector.bias, task.embedding)
    gates = ad.as_tensor(gates)
    terms = [
        gates[i] * (sc.penalty_weights[i] * equivariance_penalty(m, model, points, elements[i], params))
        for i, m in enumerate(sc.modules)
    ]
    return ad.tsum(ad.stack(terms))


def sample_virtual_direct(
    sc: SoftConstraint | StructuralModule,
    base: Dataset,
    rng: np.random.Generator,
    count: int,
) -> Dataset:
    """Constraint-consistent virtual points: random group actions applied jointly to base pairs."""
    modules = [sc] if isinstance(sc, StructuralModule) else sc.modules
    for m in modules:
        if not m.tractable:
            raise IntractableConstraintError(f"module {m.kind!r} cannot be sampled directly")
    xs, ys = [], []
    for j in range(count):
        m = modules[j % len(modules)]
        idx = int(rng.integers(len(base)))
        el = m.sample_elements(rng, 1)[0]
        xs.append(m.act(el, base.x[idx : idx + 1]))
        ys.append(m.act(el, base.y[idx : idx + 1]))
    return Dataset(np.concatenate(xs), np.concatenate(ys))


@dataclass
class GateReport:
    means: dict[str, float] = field(default_factory=dict)

    @property
    def pruned(self) -> list[str]:
        return [k for k, v in self.means.items() if v < PRUNE_THRESHOLD]


def gate_report(sc: SoftConstraint, tasks: Sequence[Task]) -> GateReport:
    """Mean gate per module over an evaluation set of tasks."""
    if not tasks:
        return GateReport({m.kind: float("nan") for m in sc.modules})
    g = np.mean([selector_gate(sc.selector, t) for t in tasks], axis=0)
    return GateReport({m.kind: float(v) for m, v in zip(sc.modules, g)})
