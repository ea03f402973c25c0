"""Small feed-forward networks and first-order optimisers."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor

ACTIVATIONS = ("tanh", "relu", "identity", "sigmoid", "softmax")


@dataclass
class Mlp:
    """Dense network. ``params`` alternates ``W_l`` of shape (in, out) and ``b_l`` of shape (out,)."""

    widths: list[int]
    activations: list[str]
    params: list[np.ndarray]

    def __post_init__(self) -> None:
        if len(self.widths) < 2:
            raise ValueError("an Mlp needs at least input and output widths")
        if len(self.activations) != len(self.widths) - 1:
            raise ValueError("one activation per layer required")
        for act in self.activations:
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
        if len(self.params) != 2 * (len(self.widths) - 1):
            raise ValueError("parameter list does not match layer count")
        for layer, (n_in, n_out) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            w, b = self.params[2 * layer], self.params[2 * layer + 1]
            if w.shape != (n_in, n_out) or b.shape != (n_out,):
                raise ValueError(f"layer {layer}: expected W {(n_in, n_out)}, b {(n_out,)}")

    @classmethod
    def init(
        cls,
        widths: Sequence[int],
        activations: Sequence[str] | str,
        rng: np.random.Generator,
        gain: float = 1.0,
    ) -> "Mlp":
        widths = list(widths)
        if isinstance(activations, str):
            # hidden layers use the given activation, the head is linear
            activations = [activations] * (len(widths) - 2) + ["identity"]
        params = []
        for n_in, n_out in zip(widths[:-1], widths[1:]):
            scale = gain * np.sqrt(1.0 / n_in)
            params.append(rng.normal(0.0, scale, size=(n_in, n_out)))
            params.append(np.zeros(n_out))
        return cls(widths, list(activations), params)

    @classmethod
    def zeros(cls, widths: Sequence[int], activations: Sequence[str]) -> "Mlp":
        widths = list(widths)
        params = []
        for n_in, n_out in zip(widths[:-1], widths[1:]):
            params += [np.zeros((n_in, n_out)), np.zeros(n_out)]
        return cls(widths, list(activations), params)

    @property
    def n_params(self) -> int:
        return sum(a * b + b for a, b in zip(self.widths[:-1], self.widths[1:]))

    def copy(self) -> "Mlp":
        return Mlp(list(self.widths), list(self.activations), [p.copy() for p in self.params])

    def with_params(self, params: Sequence[np.ndarray]) -> "Mlp":
        return Mlp(list(self.widths), list(self.activations), [np.array(p, dtype=np.float64) for p in params])

    def flat(self) -> np.ndarray:
        return flatten(self.params)

    def unflatten(self, vec: np.ndarray) -> list[np.ndarray]:
        return unflatten(vec, [p.shape for p in self.params])


def flatten(params: Sequence[np.ndarray]) -> np.ndarray:
    if not params:
        return np.zeros(0)
    return np.concatenate([np.asarray(p, dtype=np.float64).reshape(-1) for p in params])


def unflatten(vec: np.ndarray, shapes: Sequence[tuple[int, ...]]) -> list[np.ndarray]:
    out, i = [], 0
    for s in shapes:
        n = int(np.prod(s))
        out.append(np.array(vec[i : i + n], dtype=np.float64).reshape(s))
        i += n
    if i != vec.size:
        raise ValueError(f"vector of length {vec.size} does not match {i} parameters")
    return out


def _activate(z: Tensor, act: str) -> Tensor:
    if act == "tanh":
        return ad.tanh(z)
    if act == "relu":
        return ad.relu(z)
    if act == "sigmoid":
        return ad.sigmoid(z)
    if act == "softmax":
        return ad.softmax(z, axis=-1)
    return z


def apply(params: Sequence, activations: Sequence[str], x) -> Tensor:
    """Run the network with explicit (possibly taped) parameters on a batch ``x`` of shape (n, in)."""
    h = ad.as_tensor(x)
    if h.data.ndim == 1:
        h = ad.reshape(h, (1, -1))
    for layer, act in enumerate(activations):
        w, b = params[2 * layer], params[2 * layer + 1]
        if h.shape[1] != ad.as_tensor(w).shape[0]:
            raise ValueError(f"input width {h.shape[1]} does not match layer width {ad.as_tensor(w).shape[0]}")
        h = _activate(ad.add(ad.matmul(h, w), b), act)
    return h


def forward(mlp: Mlp, x, tape: Tape | None = None) -> Tensor | tuple[Tensor, list[Tensor]]:
    """Evaluate ``mlp`` on ``x``.

    Without a tape the result is a constant tensor. With a tape the parameters are
    registered as leaves and ``(output, leaves)`` is returned for use with
    :func:`autodiff.backward`.
    """
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    if x.shape[1] != mlp.widths[0]:
        raise ValueError(f"input width {x.shape[1]} does not match Mlp input width {mlp.widths[0]}")
    if tape is None:
        return apply([Tensor(p) for p in mlp.params], mlp.activations, x)
    leaves = tape.leaves(mlp.params)
    return apply(leaves, mlp.activations, x), leaves


def predict(mlp: Mlp, x) -> np.ndarray:
    """Fast numpy-only evaluation, numerically identical to :func:`forward`."""
    return forward(mlp, x).data


def output_sum_param_grad(params: Sequence, activations: Sequence[str], x, cotangent=None) -> list[Tensor]:
    """Gradient of ``sum(f(x))`` with respect to every parameter, built from differentiable ops.

    With ``cotangent`` (same shape as the output) the gradient is of
    ``sum(cotangent * f(x))`` instead, which gives parameter gradients of any loss
    whose output derivative is known.

    Expressing the backward pass of the network as ordinary taped ops lets callers
    differentiate a gradient-norm penalty without a generic second-order engine.
    """
    h = ad.as_tensor(x)
    hs, outs = [h], []
    for layer, act in enumerate(activations):
        w, b = params[2 * layer], params[2 * layer + 1]
        z = ad.add(ad.matmul(hs[-1], w), b)
        a = _activate(z, act)
        outs.append(a)
        hs.append(a)
    n_layers = len(activations)
    delta = None
    grads: list[Tensor] = [None] * (2 * n_layers)  # type: ignore[list-item]
    for layer in range(n_layers - 1, -1, -1):
        a, act = outs[layer], activations[layer]
        if delta is None:
            upstream = ad.Tensor(np.ones(a.shape)) if cotangent is None else ad.as_tensor(cotangent)
        else:
            upstream = delta
        if act == "tanh":
            dz = upstream * (1.0 - a * a)
        elif act == "sigmoid":
            dz = upstream * (a * (1.0 - a))
        elif act == "relu":
            dz = upstream * ad.Tensor((a.data > 0).astype(np.float64))
        elif act == "identity":
            dz = upstream
        else:
            raise ValueError("gradient-norm penalty does not support softmax heads")
        grads[2 * layer] = ad.matmul(ad.transpose(hs[layer]), dz)
        grads[2 * layer + 1] = ad.tsum(dz, axis=0)
        if layer > 0:
            delta = ad.matmul(dz, ad.transpose(params[2 * layer]))
    return grads


@dataclass
class Optimizer:
    """First-order optimiser state (``sgd`` or bias-corrected ``adam``)."""

    kind: str = "sgd"
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimiser {self.kind!r}")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> list[np.ndarray]:
        """Return updated copies of ``params``; inputs are left untouched."""
        if len(params) != len(grads):
            raise ValueError("params and grads differ in length")
        for p, g in zip(params, grads):
            if np.shape(p) != np.shape(g):
                raise ValueError(f"shape mismatch: param {np.shape(p)} vs grad {np.shape(g)}")
        if self.kind == "sgd":
            return [np.asarray(p) - self.lr * np.asarray(g) for p, g in zip(params, grads)]
        if not self.m:
            self.m = [np.zeros(np.shape(p)) for p in params]
            self.v = [np.zeros(np.shape(p)) for p in params]
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            m_hat = self.m[i] / (1 - b1**self.t)
            v_hat = self.v[i] / (1 - b2**self.t)
            out.append(np.asarray(p) - self.lr * m_hat / (np.sqrt(v_hat) + self.eps))
        return out

    def state_dict(self) -> dict:
        return {
            "kind": self.kind,
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "t": self.t,
            "m": [m.copy() for m in self.m],
            "v": [v.copy() for v in self.v],
        }

    @classmethod
    def from_state(cls, state: dict) -> "Optimizer":
        return cls(
            kind=state["kind"],
            lr=state["lr"],
            beta1=state["beta1"],
            beta2=state["beta2"],
            eps=state["eps"],
            t=state["t"],
            m=[np.array(m, dtype=np.float64) for m in state["m"]],
            v=[np.array(v, dtype=np.float64) for v in state["v"]],
        )
