"""Task families, task embeddings and distances, dataset synthesis and the visitation history.

Three domains share one interface (:class:`Domain`):

* ``polynomial`` -- y = a x^2 + b x + c on an interval, embedding (a, b, c);
* ``game`` -- 2x2 games u_i = phi + lam*F_i + mu*E_i; the model maps flattened
  payoffs to the canonical equilibrium, embedding (lam, mu);
* ``planar`` -- y = r R(angle) x on the plane, a rotation-equivariant and
  translation-sensitive family, embedding (r cos angle, r sin angle).

Every domain can also rebuild a task's data as a differentiable function of the
task parameters for a fixed random probe, which is how exploration scores pass
gradients back into a task generator.
"""

from __future__ import annotations

from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Any, Iterable, Sequence

import numpy as np

from . import autodiff as ad
from . import games
from .autodiff import Tensor


@dataclass
class PolynomialPayload:
    a: float
    b: float
    c: float
    lo: float = -1.0
    hi: float = 1.0
    noise: float = 0.0
    n: int = 20

    def __post_init__(self) -> None:
        if not self.lo < self.hi:
            raise ValueError("input range needs lo < hi")
        if self.n < 1:
            raise ValueError("sample count must be at least 1")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")


@dataclass
class GamePayload:
    lam: float
    mu: float
    n: int = 32


@dataclass
class PlanarPayload:
    r: float
    angle: float
    noise: float = 0.0
    n: int = 20


PAYLOADS = {"polynomial": PolynomialPayload, "game": GamePayload, "planar": PlanarPayload}


@dataclass
class Task:
    id: int
    domain: str
    payload: Any
    embedding: np.ndarray

    def __post_init__(self) -> None:
        self.embedding = np.asarray(self.embedding, dtype=np.float64).reshape(-1)

    def to_record(self) -> dict:
        return {
            "id": int(self.id),
            "domain": self.domain,
            "payload": asdict(self.payload),
            "embedding": [float(v) for v in self.embedding],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Task":
        payload = PAYLOADS[rec["domain"]](**rec["payload"])
        return cls(int(rec["id"]), rec["domain"], payload, np.asarray(rec["embedding"], dtype=np.float64))


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self) -> None:
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.x.ndim == 1:
            self.x = self.x.reshape(-1, 1)
        if self.y.ndim == 1:
            self.y = self.y.reshape(-1, 1)
        if len(self.x) != len(self.y):
            raise ValueError("inputs and targets differ in length")
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.y))):
            raise ValueError("dataset contains non-finite values")

    def __len__(self) -> int:
        return len(self.x)

    def split(self, n_support: int) -> tuple["Dataset", "Dataset"]:
        return Dataset(self.x[:n_support], self.y[:n_support]), Dataset(self.x[n_support:], self.y[n_support:])

    @staticmethod
    def concat(parts: Sequence["Dataset"]) -> "Dataset":
        return Dataset(np.concatenate([p.x for p in parts]), np.concatenate([p.y for p in parts]))


# ---- distances and history ------------------------------------------------


def task_distance(t1: Task, t2: Task) -> float:
    if t1.embedding.shape != t2.embedding.shape:
        raise ValueError(f"embedding dimensions differ: {t1.embedding.shape} vs {t2.embedding.shape}")
    return float(np.linalg.norm(t1.embedding - t2.embedding))


@dataclass
class HistoryEntry:
    task: Task
    loss: float
    step: int


class TaskHistory:
    """Visitation record of ``(task, loss, step)``; bounded, oldest entries evicted first."""

    def __init__(self, cap: int = 4096) -> None:
        if cap < 1:
            raise ValueError("history cap must be positive")
        self.cap = cap
        self.entries: deque[HistoryEntry] = deque(maxlen=cap)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def append(self, task: Task, loss: float, step: int) -> None:
        if not np.isfinite(loss):
            raise ValueError("history losses must be finite")
        self.entries.append(HistoryEntry(task, float(loss), int(step)))

    def embeddings(self) -> np.ndarray:
        return np.stack([e.task.embedding for e in self.entries])

    def losses(self) -> np.ndarray:
        return np.array([e.loss for e in self.entries])

    def ids(self) -> np.ndarray:
        return np.array([e.task.id for e in self.entries])

    def to_records(self) -> list[dict]:
        return [{"task": e.task.to_record(), "loss": e.loss, "step": e.step} for e in self.entries]

    @classmethod
    def from_records(cls, records: Iterable[dict], cap: int) -> "TaskHistory":
        h = cls(cap)
        for r in records:
            h.append(Task.from_record(r["task"]), r["loss"], r["step"])
        return h


def select_reference(history: TaskHistory, task: Task, mode: str = "argmin") -> HistoryEntry:
    """Nearest (or, with ``mode='argmax'``, farthest) history entry; ties go to the lowest id."""
    if len(history) == 0:
        raise ValueError("cannot select a reference from an empty history")
    best = None
    for e in history:
        d = task_distance(task, e.task)
        key = (d if mode == "argmin" else -d, e.task.id)
        if best is None or key < best[0]:
            best = (key, e)
    return best[1]


# ---- domains --------------------------------------------------------------


class Domain:
    """Common interface of a task family; parameters live in a box ``[lo, hi]``."""

    name = ""
    param_names: tuple[str, ...] = ()
    in_dim = 1
    out_dim = 1

    def __init__(self, lo: Sequence[float], hi: Sequence[float]) -> None:
        self.lo = np.asarray(lo, dtype=np.float64)
        self.hi = np.asarray(hi, dtype=np.float64)
        if np.any(self.lo > self.hi):
            raise ValueError("prior box needs lo <= hi in every coordinate")

    @property
    def n_params(self) -> int:
        return len(self.param_names)

    def box(self, scale: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
        """Prior box shrunk about its centre to ``scale`` of its width."""
        centre = 0.5 * (self.lo + self.hi)
        half = 0.5 * (self.hi - self.lo) * scale
        return centre - half, centre + half

    def sample_params(self, rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
        lo, hi = self.box(scale)
        return rng.uniform(lo, hi)

    def sample_task(self, rng: np.random.Generator, task_id: int, scale: float = 1.0) -> Task:
        return self.make_task(self.sample_params(rng, scale), task_id)

    def embed(self, params):
        """Embedding as a differentiable function of the parameters (tensor or array)."""
        return ad.as_tensor(params)

    def make_task(self, params: np.ndarray, task_id: int) -> Task:
        raise NotImplementedError

    def params_of(self, task: Task) -> np.ndarray:
        raise NotImplementedError

    def probe(self, rng: np.random.Generator, n: int) -> Any:
        """Randomness that, with the parameters, fixes a dataset completely."""
        raise NotImplementedError

    def build(self, params, probe) -> tuple[Tensor, Tensor]:
        """Dataset as tensors; inputs and/or targets differentiable in ``params``."""
        raise NotImplementedError

    def target_fn(self, params, x) -> Tensor:
        """Noise-free targets at inputs ``x``, differentiable in ``params``."""
        x = np.asarray(x, dtype=np.float64)
        return self.build(params, (x, np.zeros((x.shape[0], self.out_dim))))[1]

    def dataset(self, task: Task, rng: np.random.Generator, n: int | None = None) -> Dataset:
        n = task.payload.n if n is None else n
        x, y = self.build(self.params_of(task), self.probe(rng, n))
        return Dataset(x.data, y.data)

    def collocation_points(self, rng: np.random.Generator, count: int) -> np.ndarray:
        raise NotImplementedError


class PolynomialDomain(Domain):
    name = "polynomial"
    param_names = ("a", "b", "c")

    def __init__(
        self,
        a: Sequence[float] = (-1.0, 1.0),
        b: Sequence[float] = (-1.0, 1.0),
        c: Sequence[float] = (-1.0, 1.0),
        x_range: Sequence[float] = (-2.0, 2.0),
        noise: float = 0.0,
        n: int = 20,
        embed_dim: int = 3,
    ) -> None:
        super().__init__([a[0], b[0], c[0]], [a[1], b[1], c[1]])
        self.x_lo, self.x_hi = float(x_range[0]), float(x_range[1])
        if not self.x_lo < self.x_hi:
            raise ValueError("input range needs lo < hi")
        self.noise = float(noise)
        self.n = int(n)
        if embed_dim < 3:
            raise ValueError("polynomial embedding needs at least 3 dimensions")
        self.embed_dim = int(embed_dim)

    def embed(self, params):
        p = ad.as_tensor(params)
        if self.embed_dim == 3:
            return p
        return ad.concat([p, ad.Tensor(np.zeros(self.embed_dim - 3))])

    def make_task(self, params, task_id: int) -> Task:
        a, b, c = (float(v) for v in params)
        payload = PolynomialPayload(a, b, c, self.x_lo, self.x_hi, self.noise, self.n)
        return Task(task_id, self.name, payload, self.embed(np.array([a, b, c])).data)

    def params_of(self, task: Task) -> np.ndarray:
        s = task.payload
        return np.array([s.a, s.b, s.c])

    def probe(self, rng, n):
        x = rng.uniform(self.x_lo, self.x_hi, size=(n, 1))
        eps = rng.normal(0.0, 1.0, size=(n, 1)) if self.noise > 0 else np.zeros((n, 1))
        return x, eps

    def build(self, params, probe):
        x, eps = probe
        p = ad.as_tensor(params)
        y = p[0] * (x * x) + p[1] * x + p[2] + self.noise * eps
        return ad.Tensor(x), y

    def dataset(self, task, rng, n=None):
        s = task.payload
        n = s.n if n is None else n
        x = rng.uniform(s.lo, s.hi, size=(n, 1))
        y = s.a * x * x + s.b * x + s.c
        if s.noise > 0:
            y = y + s.noise * rng.normal(0.0, 1.0, size=(n, 1))
        return Dataset(x, y)

    def collocation_points(self, rng, count):
        return rng.uniform(self.x_lo, self.x_hi, size=(count, 1))


class GameDomain(Domain):
    name = "game"
    param_names = ("lam", "mu")
    in_dim = 8
    out_dim = 2

    def __init__(self, lam: Sequence[float] = (0.0, 1.0), mu: Sequence[float] = (0.0, 1.0), n: int = 32) -> None:
        super().__init__([lam[0], mu[0]], [lam[1], mu[1]])
        self.n = int(n)

    def make_task(self, params, task_id: int) -> Task:
        lam, mu = (float(v) for v in params)
        return Task(task_id, self.name, GamePayload(lam, mu, self.n), np.array([lam, mu]))

    def params_of(self, task: Task) -> np.ndarray:
        return np.array([task.payload.lam, task.payload.mu])

    def probe(self, rng, n):
        phi = rng.uniform(-1.0, 1.0, size=(n, 2, 2))
        f = rng.uniform(-1.0, 1.0, size=(n, 2, 2))  # f[:, 0] is F_1(a2), f[:, 1] is F_2(a1)
        e = rng.uniform(-1.0, 1.0, size=(n, 2, 2, 2))
        return phi, f, e

    @staticmethod
    def game_arrays(phi, f, e) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Per-sample payoff components, each shaped (n, 2, 2, 2) as (sample, player, a1, a2)."""
        base = np.stack([phi, phi], axis=1)
        resid = np.stack([np.broadcast_to(f[:, 0][:, None, :], phi.shape), np.broadcast_to(f[:, 1][:, :, None], phi.shape)], axis=1)
        return base, resid, e

    def build(self, params, probe):
        base, resid, noise = self.game_arrays(*probe)
        p = ad.as_tensor(params)
        n = base.shape[0]
        payoffs = ad.Tensor(base.reshape(n, 8)) + p[0] * resid.reshape(n, 8) + p[1] * noise.reshape(n, 8)
        targets = np.array([self.target(payoffs.data[i]) for i in range(n)])
        return payoffs, ad.Tensor(targets)

    @staticmethod
    def target(flat_payoffs: np.ndarray) -> np.ndarray:
        g = games.NormalFormGame(flat_payoffs.reshape(2, 2, 2))
        try:
            prof = games.canonical_equilibrium(g)
        except ValueError:
            return np.array([0.5, 0.5])
        return np.array([prof.strategies[0][0], prof.strategies[1][0]])

    def target_fn(self, params, x) -> Tensor:
        raise ValueError("game targets are equilibria, not a differentiable function of the inputs")

    def game_class(self, task: Task) -> str:
        if task.payload.mu > 0:
            return "general"
        return "team" if task.payload.lam == 0 else "potential"

    def collocation_points(self, rng, count):
        return rng.uniform(-1.0, 1.0, size=(count, 8))


class PlanarDomain(Domain):
    name = "planar"
    param_names = ("r", "angle")
    in_dim = 2
    out_dim = 2

    def __init__(self, r: Sequence[float] = (0.5, 1.5), angle: Sequence[float] = (0.0, 2 * np.pi), noise: float = 0.0, n: int = 20) -> None:
        super().__init__([r[0], angle[0]], [r[1], angle[1]])
        self.noise = float(noise)
        self.n = int(n)

    def embed(self, params):
        p = ad.as_tensor(params)
        return ad.stack([p[0] * ad.cos(p[1]), p[0] * ad.sin(p[1])])

    def make_task(self, params, task_id: int) -> Task:
        r, angle = (float(v) for v in params)
        return Task(task_id, self.name, PlanarPayload(r, angle, self.noise, self.n), self.embed(np.array([r, angle])).data)

    def params_of(self, task: Task) -> np.ndarray:
        return np.array([task.payload.r, task.payload.angle])

    def probe(self, rng, n):
        x = rng.normal(0.0, 1.0, size=(n, 2))
        eps = rng.normal(0.0, 1.0, size=(n, 2)) if self.noise > 0 else np.zeros((n, 2))
        return x, eps

    def build(self, params, probe):
        x, eps = probe
        p = ad.as_tensor(params)
        c, s = ad.cos(p[1]), ad.sin(p[1])
        # y = r R(angle) x with R = [[c, -s], [s, c]]
        y0 = p[0] * (c * x[:, 0] - s * x[:, 1])
        y1 = p[0] * (s * x[:, 0] + c * x[:, 1])
        y = ad.stack([y0, y1], axis=1) + self.noise * eps
        return ad.Tensor(x), y

    def collocation_points(self, rng, count):
        return rng.normal(0.0, 1.0, size=(count, 2))


def make_domain(name: str, **kwargs) -> Domain:
    cls = {"polynomial": PolynomialDomain, "game": GameDomain, "planar": PlanarDomain}.get(name)
    if cls is None:
        raise ValueError(f"unknown domain {name!r}")
    return cls(**kwargs)


# ---- payload helpers ----------------------------------------------------


@dataclass
class PolynomialPrior:
    a: tuple[float, float] = (-1.0, 1.0)
    b: tuple[float, float] = (-1.0, 1.0)
    c: tuple[float, float] = (-1.0, 1.0)
    x_range: tuple[float, float] = (-2.0, 2.0)
    noise: float = 0.0
    n: int = 20
    embed_dim: int = 3
    extra: dict = field(default_factory=dict)

    def domain(self) -> PolynomialDomain:
        return PolynomialDomain(self.a, self.b, self.c, self.x_range, self.noise, self.n, self.embed_dim)


def sample_polynomial_task(rng: np.random.Generator, prior: PolynomialPrior, task_id: int = 0, scale: float = 1.0) -> Task:
    """Coefficients uniform in the (optionally shrunk) prior ranges."""
    for lo, hi in (prior.a, prior.b, prior.c):
        if lo > hi:
            raise ValueError("prior ranges must be non-empty")
    return prior.domain().sample_task(rng, task_id, scale)


def generate_dataset(task: Task, rng: np.random.Generator) -> Dataset:
    """Inputs uniform on the task's range, polynomial targets plus Gaussian noise."""
    if task.domain != "polynomial":
        raise ValueError(f"generate_dataset expects a polynomial task, got {task.domain!r}")
    s = task.payload
    return PolynomialDomain(x_range=(s.lo, s.hi), noise=s.noise, n=s.n).dataset(task, rng)
