"""Tape-based reverse-mode differentiation over dense float64 arrays.

A :class:`Tape` records every primitive applied to tensors that live on it, in
creation order, so the record is already topologically sorted. ``backward``
walks it once in reverse. Tensors with no tape are constants: ops on them run
eagerly and record nothing.

    tape = Tape()
    w = tape.leaf(np.ones(3))
    loss = (w * w).sum()
    (gw,) = backward(tape, loss, [w])
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

VJP = Callable[[np.ndarray], tuple]


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or inf."""


class Tape:
    """Ordered record of primitive operations.

    Each entry is ``(parent node ids, vjp)``; leaves carry ``vjp=None``.
    """

    def __init__(self) -> None:
        self.parents: list[tuple[int, ...]] = []
        self.vjps: list[VJP | None] = []

    def __len__(self) -> int:
        return len(self.vjps)

    def leaf(self, value) -> "Tensor":
        arr = np.array(value, dtype=np.float64)
        _check_finite(arr, "leaf")
        self.parents.append(())
        self.vjps.append(None)
        return Tensor(arr, self, len(self.vjps) - 1)

    def leaves(self, values: Sequence) -> list["Tensor"]:
        return [self.leaf(v) for v in values]

    def _record(self, value: np.ndarray, inputs: Sequence["Tensor"], vjp: VJP) -> "Tensor":
        self.parents.append(tuple(t.node for t in inputs))
        self.vjps.append(vjp)
        return Tensor(value, self, len(self.vjps) - 1)


class Tensor:
    """Immutable float64 array, optionally tracked on a tape."""

    __slots__ = ("data", "tape", "node")
    __array_priority__ = 100.0

    def __init__(self, data, tape: Tape | None = None, node: int = -1) -> None:
        self.data = data if isinstance(data, np.ndarray) else np.array(data, dtype=np.float64)
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self) -> str:
        where = "const" if self.tape is None else f"node={self.node}"
        return f"Tensor({self.data!r}, {where})"

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)

    @property
    def T(self):
        return transpose(self)


def _raise_not_scalar(t: Tensor) -> float:
    raise ValueError(f"tensor of shape {t.shape} is not a scalar")


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite value produced by {op}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _tape_of(*ts: Tensor) -> Tape | None:
    tape = None
    for t in ts:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ValueError("operands live on different tapes")
            tape = t.tape
    return tape


def _make(value: np.ndarray, inputs: Sequence[Tensor], vjp: VJP, op: str) -> Tensor:
    _check_finite(value, op)
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor(value)
    return tape._record(value, inputs, vjp)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---- elementwise binary ---------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
        "div",
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(ad**p, (a,), lambda g: (g * p * ad ** (p - 1),), "pow")


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {ad.shape} @ {bd.shape}")
    if ad.shape[1] != bd.shape[0]:
        raise ValueError(f"shape mismatch in matmul: {ad.shape} @ {bd.shape}")
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


# ---- elementwise unary ----------------------------------------------------


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    if np.any(ad <= 0):
        raise NonFiniteError("log of non-positive value")
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def cos(a) -> Tensor:
    a = as_tensor(a)
    v = a.data
    return _make(np.cos(v), (a,), lambda g: (-g * np.sin(v),), "cos")


def sin(a) -> Tensor:
    a = as_tensor(a)
    v = a.data
    return _make(np.sin(v), (a,), lambda g: (g * np.cos(v),), "sin")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = (a.data > 0).astype(np.float64)
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    # split on sign so exp never overflows
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus_np(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > 0, x + np.log1p(np.exp(-np.abs(x))), np.log1p(np.exp(np.minimum(x, 0.0))))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = sigmoid_np(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a) -> Tensor:
    a = as_tensor(a)
    s = sigmoid_np(a.data)
    return _make(softplus_np(a.data), (a,), lambda g: (g * s,), "softplus")


def log_sigmoid(a) -> Tensor:
    """``log(sigmoid(a)) = -softplus(-a)``, finite for any finite input."""
    return neg(softplus(neg(a)))


def abs_(a) -> Tensor:
    a = as_tensor(a)
    sgn = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * sgn,), "abs")


def clip_st(a, lo, hi) -> Tensor:
    """Clamp in the forward pass, identity in the backward pass (straight-through)."""
    a = as_tensor(a)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g,), "clip_st")


def stop_gradient(a) -> Tensor:
    return Tensor(as_tensor(a).data)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), vjp, "softmax")


def norm(a) -> Tensor:
    """Euclidean norm of all entries; subgradient 0 at the origin."""
    a = as_tensor(a)
    ad = a.data
    n = float(np.sqrt(np.sum(ad * ad)))

    def vjp(g):
        if n == 0.0:
            return (np.zeros_like(ad),)
        return (g * ad / n,)

    return _make(np.array(n), (a,), vjp, "norm")


# ---- reductions and shape ops ---------------------------------------------


def tsum(a, axis=None) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis), dtype=np.float64), (a,), vjp, "sum")


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return tsum(a, axis) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.T, (a,), lambda g: (g.T,), "transpose")


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _make(np.array(a.data[idx], dtype=np.float64), (a,), vjp, "getitem")


def concat(ts: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in ts]
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(ts))
        )

    return _make(np.concatenate([t.data for t in ts], axis=axis), ts, vjp, "concat")


def stack(ts: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in ts]

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _make(np.stack([t.data for t in ts], axis=axis), ts, vjp, "stack")


def dot(a, b) -> Tensor:
    """Sum of elementwise products (full contraction)."""
    return tsum(mul(a, b))


# ---- reverse pass ---------------------------------------------------------


def backward(tape: Tape, loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of scalar ``loss`` with respect to each tensor in ``wrt``.

    Tensors the loss does not depend on get a zero gradient.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    for t in wrt:
        if t.tape is not tape:
            raise ValueError("gradient requested for a tensor not on this tape")
    if loss.tape is None:
        return [np.zeros_like(t.data) for t in wrt]
    if loss.tape is not tape:
        raise ValueError("loss lives on a different tape")

    grads: dict[int, np.ndarray] = {loss.node: np.ones_like(loss.data)}
    for node in range(loss.node, -1, -1):
        g = grads.pop(node, None) if tape.vjps[node] is not None else grads.get(node)
        if g is None:
            continue
        vjp = tape.vjps[node]
        if vjp is None:
            continue
        for parent, pg in zip(tape.parents[node], vjp(g)):
            if parent < 0:
                continue
            if parent in grads:
                grads[parent] = grads[parent] + pg
            else:
                grads[parent] = pg
    return [np.array(grads.get(t.node, np.zeros_like(t.data)), dtype=np.float64).reshape(t.shape) for t in wrt]


def fd_gradient(
    f: Callable[[list[np.ndarray]], float],
    params: Sequence[np.ndarray],
    step: float = 1e-5,
) -> list[np.ndarray]:
    """Central-difference gradient of ``f`` at ``params``, coordinate by coordinate."""
    if step <= 0:
        raise ValueError("step must be positive")
    base = [np.array(p, dtype=np.float64) for p in params]
    out = []
    for i, p in enumerate(base):
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            fp = f(base)
            flat[j] = orig - step
            fm = f(base)
            flat[j] = orig
            gflat[j] = (fp - fm) / (2.0 * step)
        out.append(g)
    return out


def max_relative_error(a: Sequence[np.ndarray], b: Sequence[np.ndarray], floor: float = 1e-8) -> float:
    """Max over entries of ``|a-b| / max(|a|, |b|, floor)``."""
    worst = 0.0
    for x, y in zip(a, b):
        denom = np.maximum(np.maximum(np.abs(x), np.abs(y)), floor)
        if x.size:
            worst = max(worst, float(np.max(np.abs(x - y) / denom)))
    return worst
