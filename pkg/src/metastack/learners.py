"""Level-0 models and the level-1 learner that instantiates and adapts them per task."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tape, Tensor
from .nn import Mlp
from .tasks import Dataset, Task


class DivergenceError(ArithmeticError):
    """A loss became non-finite during training."""


@dataclass
class LearnerParams:
    """How a level-1 learner produces level-0 models.

    ``mode='init'`` copies a shared initialisation; ``mode='hypernetwork'`` maps
    the task embedding through ``hyper`` to a flat weight vector for ``init``'s
    architecture.
    """

    init: Mlp
    alpha: float = 0.05
    steps: int = 5
    mode: str = "init"
    hyper: Mlp | None = None
    inner_loss: str = "mse"
    surrogate_lambda: float = 0.0

    def __post_init__(self) -> None:
        if self.mode not in ("init", "hypernetwork"):
            raise ValueError(f"unknown learner mode {self.mode!r}")
        if not self.alpha > 0:
            raise ValueError("inner learning rate must be positive")
        if self.steps < 0:
            raise ValueError("inner step count must be non-negative")
        if self.inner_loss not in ("mse", "surrogate"):
            raise ValueError(f"unknown inner loss {self.inner_loss!r}")
        if self.mode == "hypernetwork":
            if self.hyper is None:
                raise ValueError("hypernetwork mode needs a hypernetwork")
            if self.hyper.widths[-1] != self.init.n_params:
                raise ValueError(
                    f"hypernetwork emits {self.hyper.widths[-1]} values, model has {self.init.n_params} parameters"
                )

    def copy(self) -> "LearnerParams":
        return LearnerParams(
            self.init.copy(),
            self.alpha,
            self.steps,
            self.mode,
            None if self.hyper is None else self.hyper.copy(),
            self.inner_loss,
            self.surrogate_lambda,
        )

    @property
    def meta_params(self) -> list[np.ndarray]:
        """The parameters a meta-update acts on."""
        return self.init.params if self.mode == "init" else self.hyper.params

    def with_meta_params(self, params: Sequence[np.ndarray]) -> "LearnerParams":
        out = self.copy()
        if self.mode == "init":
            out.init = self.init.with_params(params)
        else:
            out.hyper = self.hyper.with_params(params)
        return out


@dataclass
class AdaptedModel:
    model: Mlp
    task_id: int
    loss: float
    trace: list[float] = field(default_factory=list)
    grad_sum: list[np.ndarray] = field(default_factory=list)
    extra_grad_sums: list[list[np.ndarray]] = field(default_factory=list)


def make_hypernetwork(embed_dim: int, model: Mlp, rng: np.random.Generator, hidden: int = 0, gain: float = 0.1) -> Mlp:
    widths = [embed_dim] + ([hidden] if hidden else []) + [model.n_params]
    return Mlp.init(widths, "tanh", rng, gain=gain)


def instantiate(lp: LearnerParams, task: Task) -> Mlp:
    if lp.mode == "init":
        return lp.init.copy()
    if task.embedding is None or task.embedding.size != lp.hyper.widths[0]:
        raise ValueError("hypernetwork mode needs a task embedding of matching dimension")
    flat = nn.predict(lp.hyper, task.embedding.reshape(1, -1)).reshape(-1)
    return lp.init.with_params(lp.init.unflatten(flat))


def hypernetwork_meta_grad(lp: LearnerParams, task: Task, model_grad: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Pull a gradient on generated model weights back to the hypernetwork weights."""
    tape = Tape()
    leaves = tape.leaves(lp.hyper.params)
    out = nn.apply(leaves, lp.hyper.activations, task.embedding.reshape(1, -1))
    loss = ad.dot(out, nn.flatten(model_grad).reshape(1, -1))
    return ad.backward(tape, loss, leaves)


def mse(pred: Tensor, y) -> Tensor:
    return ad.mean(ad.square(pred - y))


def task_loss(model: Mlp, data: Dataset) -> float:
    """Mean squared error of ``model`` over ``data``."""
    if len(data) == 0:
        raise ValueError("task loss over an empty dataset")
    pred = nn.predict(model, data.x)
    return float(np.mean((pred - data.y) ** 2))


def task_loss_tensor(params: Sequence, activations: Sequence[str], data: Dataset) -> Tensor:
    if len(data) == 0:
        raise ValueError("task loss over an empty dataset")
    return mse(nn.apply(params, activations, data.x), data.y)


def surrogate_tensor(params: Sequence, activations: Sequence[str], data: Dataset, lam: float) -> Tensor:
    """Squared error plus ``lam`` times the squared parameter-gradient norm of the mean output."""
    if lam < 0:
        raise ValueError("surrogate weight must be non-negative")
    err = task_loss_tensor(params, activations, data)
    if lam == 0:
        return err
    grads = nn.output_sum_param_grad(params, activations, data.x)
    scale = 1.0 / len(data)
    penalty = ad.tsum(ad.stack([ad.tsum(ad.square(g)) for g in grads])) * (scale * scale)
    return err + lam * penalty


def surrogate_loss(lp: LearnerParams | None, model: Mlp, data: Dataset, lam: float) -> float:
    return surrogate_tensor([Tensor(p) for p in model.params], model.activations, data, lam).item()


def loss_and_grad(model: Mlp, data: Dataset, kind: str = "mse", lam: float = 0.0) -> tuple[float, list[np.ndarray]]:
    tape = Tape()
    leaves = tape.leaves(model.params)
    if kind == "surrogate":
        loss = surrogate_tensor(leaves, model.activations, data, lam)
    else:
        loss = task_loss_tensor(leaves, model.activations, data)
    return loss.item(), ad.backward(tape, loss, leaves)


def inner_adapt(
    lp: LearnerParams,
    model: Mlp,
    data: Dataset,
    extra: Sequence[tuple[float, Dataset]] = (),
    alpha: float | None = None,
    task_id: int = -1,
) -> AdaptedModel:
    """Full-batch gradient descent for ``lp.steps`` steps.

    The step loss is the task (or surrogate) loss on ``data`` plus
    ``sum(w * mse(extra_data))`` over ``extra``. Per-term gradient sums along the
    trajectory are kept for first-order hypergradients of the step size and of the
    ``extra`` weights.
    """
    alpha = lp.alpha if alpha is None else alpha
    params = [p.copy() for p in model.params]
    acts = model.activations
    grad_sum = [np.zeros_like(p) for p in params]
    extra_sums = [[np.zeros_like(p) for p in params] for _ in extra]
    trace = []
    try:
        params = _descend(lp, params, acts, data, extra, alpha, grad_sum, extra_sums, trace)
    except ad.NonFiniteError as exc:
        raise DivergenceError(f"inner adaptation diverged: {exc}") from None
    adapted = model.with_params(params)
    final = task_loss(adapted, data)
    if not np.isfinite(final):
        raise DivergenceError("non-finite loss after adaptation")
    return AdaptedModel(adapted, task_id, final, trace, grad_sum, extra_sums)


def _descend(lp, params, acts, data, extra, alpha, grad_sum, extra_sums, trace):
    for _ in range(lp.steps):
        tape = Tape()
        leaves = tape.leaves(params)
        if lp.inner_loss == "surrogate":
            base = surrogate_tensor(leaves, acts, data, lp.surrogate_lambda)
        else:
            base = task_loss_tensor(leaves, acts, data)
        if not np.isfinite(base.item()):
            raise DivergenceError("non-finite inner loss")
        trace.append(base.item())
        grads = ad.backward(tape, base, leaves)
        for j, (w, vdata) in enumerate(extra):
            vloss = task_loss_tensor(leaves, acts, vdata)
            vgrads = ad.backward(tape, vloss, leaves)
            for acc, vg in zip(extra_sums[j], vgrads):
                acc += vg
            grads = [g + w * vg for g, vg in zip(grads, vgrads)]
        for acc, g in zip(grad_sum, grads):
            acc += g
        params = [p - alpha * g for p, g in zip(params, grads)]
    return params
