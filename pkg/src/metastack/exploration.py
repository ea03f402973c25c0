"""Virtual-task exploration: contextual scores, generator, discriminator and their objectives."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tape, Tensor
from .constraints import SoftConstraint, gate_tensor
from .learners import LearnerParams, inner_adapt, instantiate, mse
from .nn import Mlp
from .tasks import Dataset, Domain, Task, TaskHistory, select_reference

SIGNALS = ("smooth", "hard", "kernel", "grad_norm", "entropy")


@dataclass
class ExplorationParams:
    """Weights and thresholds of the exploration score and generator objective."""

    lam_mix: float = 0.5
    delta: float = 0.1
    eps1: float = 0.1
    eps2: float = 0.1
    alpha1: float = -0.2
    alpha2: float = -0.2
    beta: float = 0.0
    gamma: float = 0.0
    gamma_ref: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.lam_mix <= 1.0:
            raise ValueError("lam_mix must lie in [0, 1]")
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if self.eps1 < 0 or self.eps2 < 0:
            raise ValueError("thresholds eps1, eps2 must be non-negative")
        if not (self.alpha1 < 0 and self.alpha2 < 0):
            raise ValueError("floors alpha1, alpha2 must be negative")
        if self.beta < 0 or self.gamma < 0:
            raise ValueError("beta and gamma must be non-negative")
        if not self.gamma_ref > 0:
            raise ValueError("gamma_ref must be positive")

    def check_floors_below_thresholds(self) -> None:
        """Stricter check used at config load: each floor sits below its negated threshold."""
        if not (self.alpha1 < -self.eps1 and self.alpha2 < -self.eps2):
            raise ValueError("floors must satisfy alpha < -eps so thresholded terms can reach them")


@dataclass
class ScoreBreakdown:
    term1: float | np.ndarray
    term2: float | np.ndarray
    total: float | np.ndarray
    delta_loss: float | np.ndarray
    distance: float | np.ndarray


def delta_loss(loss_fn: Callable[[Task], float], tau_ref: Task, tau: Task) -> float:
    """Difficulty gap ``L(tau) - L(tau_ref)`` under the supplied evaluation policy."""
    return float(loss_fn(tau)) - float(loss_fn(tau_ref))


def _ratios(ep: ExplorationParams, dl: Tensor, d: Tensor) -> tuple[Tensor, Tensor]:
    r1 = dl / (d + ep.delta) - ep.eps1
    r2 = d / (1.0 + ad.abs_(dl)) - ep.eps2
    return r1, r2


def _floor_hard(t: Tensor, alpha: float) -> Tensor:
    # max(alpha, t) written with a constant mask so it stays on the tape
    mask = (t.data > alpha).astype(np.float64)
    return t * mask + alpha * (1.0 - mask)


def _floor_smooth(t: Tensor, alpha: float) -> Tensor:
    return ad.softplus(t - alpha) + alpha


def _mix(ep: ExplorationParams, t1: Tensor, t2: Tensor) -> Tensor:
    return ep.lam_mix * t1 + (1.0 - ep.lam_mix) * t2


def score_tensor(ep: ExplorationParams, dl, d, smooth: bool = True) -> tuple[Tensor, Tensor, Tensor]:
    """(term1, term2, total) as tensors; ``dl`` and ``d`` may be taped."""
    dl, d = ad.as_tensor(dl), ad.as_tensor(d)
    if np.any(d.data < 0):
        raise ValueError("task distance must be non-negative")
    r1, r2 = _ratios(ep, dl, d)
    floor = _floor_smooth if smooth else _floor_hard
    t1, t2 = floor(r1, ep.alpha1), floor(r2, ep.alpha2)
    return t1, t2, _mix(ep, t1, t2)


def _breakdown(parts, dl, d) -> ScoreBreakdown:
    def val(t):
        return t.item() if t.size == 1 else t.data.copy()

    t1, t2, total = parts
    return ScoreBreakdown(val(t1), val(t2), val(total), val(ad.as_tensor(dl)), val(ad.as_tensor(d)))


def score_hard(ep: ExplorationParams, dl, d) -> ScoreBreakdown:
    """``lam*max(a1, dL/(d+delta) - e1) + (1-lam)*max(a2, d/(1+|dL|) - e2)``."""
    return _breakdown(score_tensor(ep, dl, d, smooth=False), dl, d)


def score_smooth(ep: ExplorationParams, dl, d) -> ScoreBreakdown:
    """Hard score with every ``max(a, t)`` replaced by ``softplus(t - a) + a``."""
    return _breakdown(score_tensor(ep, dl, d, smooth=True), dl, d)


# ---- kernel-smoothed references ---------------------------------------------


@dataclass
class KernelRefs:
    loss_ref: float
    dist_ref: float
    weights: np.ndarray


def kernel_refs_tensor(embeddings: np.ndarray, losses: np.ndarray, emb, gamma_ref: float) -> tuple[Tensor, Tensor, Tensor]:
    """Kernel-weighted mean loss and distance of a history around ``emb``.

    Weights are ``exp(-gamma_ref d^2)`` normalised to sum to one (a softmax, for
    stability when every distance is large).
    """
    if len(losses) == 0:
        raise ValueError("kernel references need a non-empty history")
    emb = ad.as_tensor(emb)
    diff = ad.reshape(emb, (1, -1)) - embeddings
    sq = ad.tsum(ad.square(diff), axis=1)
    dists = ad.stack([ad.norm(diff[j]) for j in range(len(losses))])
    w = ad.softmax(sq * (-gamma_ref))
    return ad.tsum(w * losses), ad.tsum(w * dists), w


def kernel_refs(history: TaskHistory, task: Task | np.ndarray, gamma_ref: float) -> KernelRefs:
    if len(history) == 0:
        raise ValueError("kernel references need a non-empty history")
    emb = task.embedding if isinstance(task, Task) else np.asarray(task, dtype=np.float64)
    lref, dref, w = kernel_refs_tensor(history.embeddings(), history.losses(), emb, gamma_ref)
    return KernelRefs(lref.item(), dref.item(), w.data.copy())


def score_kernel_tensor(ep: ExplorationParams, embeddings, losses, emb, loss) -> tuple[Tensor, Tensor, Tensor, Tensor, Tensor]:
    lref, dref, _ = kernel_refs_tensor(embeddings, losses, emb, ep.gamma_ref)
    gap = ad.as_tensor(loss) - lref
    t1 = _floor_smooth(gap / (dref + ep.delta) - ep.eps1, ep.alpha1)
    spread = dref / (1.0 + ad.abs_(gap))
    t2 = _floor_smooth(spread - ep.eps2, ep.alpha2)
    return t1, t2, _mix(ep, t1, t2), gap, dref


def score_kernel(ep: ExplorationParams, history: TaskHistory, task: Task | np.ndarray, loss) -> ScoreBreakdown:
    """Smooth score against kernel-weighted references from ``history``."""
    if len(history) == 0:
        raise ValueError("kernel score needs a non-empty history")
    emb = task.embedding if isinstance(task, Task) else task
    t1, t2, total, gap, dref = score_kernel_tensor(ep, history.embeddings(), history.losses(), emb, loss)
    return _breakdown((t1, t2, total), gap, dref)


# ---- plain signals ----------------------------------------------------------


def entropy_signal(model: Mlp, x) -> float:
    """Mean Shannon entropy (nats) of a softmax-headed model's predictions."""
    if model.activations[-1] != "softmax":
        raise ValueError("entropy signal needs a model with a softmax head")
    p = nn.predict(model, x)
    logp = np.log(np.where(p > 0, p, 1.0))
    return float(np.mean(-np.sum(p * logp, axis=1)))


def grad_norm_tensor(model: Mlp, x, y) -> Tensor:
    """Norm of the parameter gradient of the squared error, differentiable in ``x`` and ``y``."""
    const = [Tensor(p) for p in model.params]
    x, y = ad.as_tensor(x), ad.as_tensor(y)
    pred = nn.apply(const, model.activations, x)
    cot = (pred - y) * (2.0 / pred.size)
    grads = nn.output_sum_param_grad(const, model.activations, x, cotangent=cot)
    return ad.sqrt(ad.tsum(ad.stack([ad.tsum(ad.square(g)) for g in grads])) + 1e-24)


def grad_norm_signal(model: Mlp, x, y) -> float:
    """Euclidean norm of the mean-squared-error gradient with respect to every parameter."""
    return grad_norm_tensor(model, np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)).item()


# ---- generator and discriminator --------------------------------------------


def _tower(n_in: int, n_out: int, hidden: int, rng: np.random.Generator, gain: float) -> Mlp:
    return Mlp.init([n_in, hidden, hidden, n_out], "tanh", rng, gain=gain)


@dataclass
class Generator:
    """Latent ``z ~ N(0, I)`` to task parameters, affinely centred on the prior box then clamped to it."""

    mlp: Mlp
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self) -> None:
        self.lo = np.asarray(self.lo, dtype=np.float64)
        self.hi = np.asarray(self.hi, dtype=np.float64)
        if self.mlp.widths[-1] != self.lo.size:
            raise ValueError(f"generator emits {self.mlp.widths[-1]} values, domain has {self.lo.size} parameters")

    @classmethod
    def init(cls, domain: Domain, rng: np.random.Generator, z_dim: int = 4, hidden: int = 32, gain: float = 1.0) -> "Generator":
        return cls(_tower(z_dim, domain.n_params, hidden, rng, gain), *domain.box())

    @property
    def z_dim(self) -> int:
        return self.mlp.widths[0]

    def copy(self) -> "Generator":
        return Generator(self.mlp.copy(), self.lo.copy(), self.hi.copy())

    def sample_latents(self, rng: np.random.Generator, count: int) -> np.ndarray:
        return rng.normal(0.0, 1.0, size=(count, self.z_dim))

    def decode(self, z, params=None) -> tuple[Tensor, Tensor]:
        """(raw, clamped) task parameters; the clamp passes gradients straight through."""
        params = [Tensor(p) for p in self.mlp.params] if params is None else params
        out = nn.apply(params, self.mlp.activations, z)
        centre, half = 0.5 * (self.lo + self.hi), 0.5 * (self.hi - self.lo)
        raw = out * half + centre
        return raw, ad.clip_st(raw, self.lo, self.hi)


@dataclass
class Discriminator:
    """Task parameters (rescaled to the prior box) to a probability of being a real task."""

    mlp: Mlp
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self) -> None:
        self.lo = np.asarray(self.lo, dtype=np.float64)
        self.hi = np.asarray(self.hi, dtype=np.float64)
        if self.mlp.widths[-1] != 1:
            raise ValueError("discriminator head must be a single logit")

    @classmethod
    def init(cls, domain: Domain, rng: np.random.Generator, hidden: int = 32, gain: float = 1.0) -> "Discriminator":
        return cls(_tower(domain.n_params, 1, hidden, rng, gain), *domain.box())

    def copy(self) -> "Discriminator":
        return Discriminator(self.mlp.copy(), self.lo.copy(), self.hi.copy())

    def logits(self, task_params, params=None) -> Tensor:
        params = [Tensor(p) for p in self.mlp.params] if params is None else params
        centre = 0.5 * (self.lo + self.hi)
        half = np.maximum(0.5 * (self.hi - self.lo), 1e-12)
        x = (ad.as_tensor(task_params) - centre) / half
        return ad.reshape(nn.apply(params, self.mlp.activations, x), (-1,))

    def prob(self, task_params) -> np.ndarray:
        return ad.sigmoid_np(self.logits(np.atleast_2d(np.asarray(task_params, dtype=np.float64))).data)


def _objective(ep: ExplorationParams, scores, manifold, log_d) -> Tensor:
    scores = ad.as_tensor(scores)
    if scores.size == 0:
        raise ValueError("generator objective needs a non-empty batch")
    loss = -ad.mean(scores)
    if ep.beta and manifold is not None:
        loss = loss + ep.beta * ad.mean(ad.as_tensor(manifold))
    if ep.gamma:
        loss = loss - ep.gamma * ad.mean(ad.as_tensor(log_d))
    return loss


def generator_loss(ep: ExplorationParams, scores, manifold, d_out) -> Tensor:
    """``-mean(S) + beta*mean(manifold) - gamma*mean(log D)``."""
    d = ad.as_tensor(d_out)
    if np.any(d.data <= 0) or np.any(d.data >= 1):
        raise ValueError("discriminator outputs must lie strictly inside (0, 1)")
    return _objective(ep, scores, manifold, ad.log(d) if ep.gamma else None)


def discriminator_loss(disc: Discriminator, real, fake, params=None) -> Tensor:
    """Binary cross-entropy ``-log D(real) - log(1 - D(fake))`` averaged per batch."""
    real, fake = np.atleast_2d(real), np.atleast_2d(fake)
    if real.size == 0 or fake.size == 0:
        raise ValueError("discriminator needs non-empty real and generated batches")
    lr_, lf = disc.logits(real, params), disc.logits(fake, params)
    return -ad.mean(ad.log_sigmoid(lr_)) - ad.mean(ad.log_sigmoid(-lf))


def discriminator_update(
    disc: Discriminator, real, fake, lr: float = 1e-2, opt: nn.Optimizer | None = None
) -> tuple[Discriminator, float]:
    """One gradient step on the binary objective; returns the new discriminator and the pre-step loss."""
    tape = Tape()
    leaves = tape.leaves(disc.mlp.params)
    loss = discriminator_loss(disc, real, fake, leaves)
    grads = ad.backward(tape, loss, leaves)
    opt = opt or nn.Optimizer("sgd", lr)
    new = Discriminator(disc.mlp.with_params(opt.step(disc.mlp.params, grads)), disc.lo, disc.hi)
    return new, loss.item()


# ---- scoring virtual tasks --------------------------------------------------


@dataclass
class VirtualScorer:
    """Scores decoded virtual tasks against a frozen learner.

    The learner is adapted on a support set built from the (constant) virtual
    parameters; the query loss is then rebuilt from the taped parameters, so the
    score is differentiable in the task while the adapted weights are held fixed.
    """

    lp: LearnerParams
    domain: Domain
    ep: ExplorationParams
    history: TaskHistory
    signal: str = "smooth"
    loss_mode: str = "post"
    n_support: int = 10
    n_query: int = 10

    def __post_init__(self) -> None:
        if self.signal not in SIGNALS:
            raise ValueError(f"unknown exploration signal {self.signal!r}")
        if self.loss_mode not in ("pre", "post"):
            raise ValueError("loss_mode must be 'pre' or 'post'")

    def adapted_model(self, params: np.ndarray, rng: np.random.Generator, task_id: int) -> tuple[Mlp, Task]:
        task = self.domain.make_task(params, task_id)
        model = instantiate(self.lp, task)
        support = self.domain.probe(rng, self.n_support)
        if self.loss_mode == "post":
            xs, ys = self.domain.build(params, support)
            model = inner_adapt(self.lp, model, Dataset(xs.data, ys.data), task_id=task_id).model
        return model, task

    def query(self, params_t: Tensor, rng: np.random.Generator) -> tuple[Tensor, Tensor]:
        return self.domain.build(params_t, self.domain.probe(rng, self.n_query))

    def score(self, params_t: Tensor, rng: np.random.Generator, task_id: int = -1) -> tuple[Tensor, ScoreBreakdown, Task]:
        model, task = self.adapted_model(params_t.data.copy(), rng, task_id)
        xq, yq = self.query(params_t, rng)
        const = [Tensor(p) for p in model.params]
        if self.signal == "grad_norm":
            total = grad_norm_tensor(model, xq, yq)
            v = total.item()
            return total, ScoreBreakdown(v, 0.0, v, 0.0, 0.0), task
        if self.signal == "entropy":
            if model.activations[-1] != "softmax":
                raise ValueError("entropy signal needs a model with a softmax head")
            p = nn.apply(const, model.activations, xq)
            total = -ad.mean(ad.tsum(p * ad.log(p + 1e-300), axis=1))
            v = total.item()
            return total, ScoreBreakdown(v, 0.0, v, 0.0, 0.0), task
        loss = mse(nn.apply(const, model.activations, xq), yq)
        emb = self.domain.embed(params_t)
        if len(self.history) == 0:
            raise ValueError("contextual scores need a non-empty visitation history")
        if self.signal == "kernel":
            t1, t2, total, gap, dref = score_kernel_tensor(self.ep, self.history.embeddings(), self.history.losses(), emb, loss)
            return total, _breakdown((t1, t2, total), gap, dref), task
        ref = select_reference(self.history, task, "argmin")
        d = ad.norm(emb - ref.task.embedding)
        dl = loss - ref.loss
        parts = score_tensor(self.ep, dl, d, smooth=self.signal == "smooth")
        return parts[2], _breakdown(parts, dl, d), task


def task_manifold_penalty(
    sc: SoftConstraint, domain: Domain, params_t, points: np.ndarray, elements: Sequence[np.ndarray]
) -> Tensor:
    """Gated equivariance defect of a task's own target rule, ``sum_i s_i * mean||y(gx) - g y(x)||^2``."""
    params_t = ad.as_tensor(params_t)
    gates = gate_tensor(sc.selector.weights, sc.selector.bias, domain.embed(params_t))
    y = domain.target_fn(params_t, points)
    terms = []
    for i, m in enumerate(sc.modules):
        defects = [
            ad.mean(ad.tsum(ad.square(domain.target_fn(params_t, m.act(el, points)) - m.act(el, y)), axis=1))
            for el in elements[i]
        ]
        terms.append(gates[i] * (sc.penalty_weights[i] * ad.mean(ad.stack(defects))))
    return ad.tsum(ad.stack(terms))


@dataclass
class ExploreBatch:
    latents: np.ndarray
    raw: np.ndarray
    params: np.ndarray
    tasks: list[Task]
    scores: np.ndarray
    breakdowns: list[ScoreBreakdown]
    clamp_rate: float
    score_tensors: list[Tensor] = field(default_factory=list, repr=False)
    param_tensor: Tensor | None = field(default=None, repr=False)

    @property
    def mean_score(self) -> float:
        return float(np.mean(self.scores))

    def term_means(self) -> tuple[float, float]:
        return (
            float(np.mean([b.term1 for b in self.breakdowns])),
            float(np.mean([b.term2 for b in self.breakdowns])),
        )


def explore_round(
    gen: Generator,
    scorer: VirtualScorer,
    rng: np.random.Generator,
    batch: int,
    first_id: int = 0,
    gen_params: Sequence | None = None,
) -> ExploreBatch:
    """Sample latents, decode and clamp virtual tasks, and score each one."""
    if batch <= 0:
        raise ValueError("batch must be positive")
    z = gen.sample_latents(rng, batch)
    raw, clamped = gen.decode(z, gen_params)
    outside = (raw.data < gen.lo) | (raw.data > gen.hi)
    tensors, bds, tasks = [], [], []
    for j in range(batch):
        s, bd, task = scorer.score(clamped[j], rng, first_id + j)
        tensors.append(s)
        bds.append(bd)
        tasks.append(task)
    return ExploreBatch(
        z,
        raw.data.copy(),
        clamped.data.copy(),
        tasks,
        np.array([t.item() for t in tensors]),
        bds,
        float(np.mean(outside)),
        tensors,
        clamped,
    )


@dataclass
class GeneratorStep:
    generator: Generator
    batch: ExploreBatch
    loss: float
    grad_norm: float
    d_fake_mean: float
    manifold_mean: float


def generator_step(
    gen: Generator,
    scorer: VirtualScorer,
    ep: ExplorationParams,
    rng: np.random.Generator,
    batch: int,
    opt: nn.Optimizer,
    disc: Discriminator | None = None,
    sc: SoftConstraint | None = None,
    manifold_inputs: tuple[np.ndarray, Sequence[np.ndarray]] | None = None,
    first_id: int = 0,
    score_weight: float = 1.0,
) -> GeneratorStep:
    """One update of the generator on its objective.

    ``score_weight=0`` drops the exploration term, leaving only the manifold and
    adversarial terms.
    """
    tape = Tape()
    leaves = tape.leaves(gen.mlp.params)
    eb = explore_round(gen, scorer, rng, batch, first_id, leaves)
    scores = ad.stack(eb.score_tensors) * score_weight
    manifold = None
    man_mean = 0.0
    if sc is not None and manifold_inputs is not None:
        pts, els = manifold_inputs
        manifold = ad.stack([task_manifold_penalty(sc, scorer.domain, eb.param_tensor[j], pts, els) for j in range(batch)])
        man_mean = float(np.mean(manifold.data))
    log_d = None
    d_mean = float("nan")
    if disc is not None:
        logits = disc.logits(eb.param_tensor)
        log_d = ad.log_sigmoid(logits)
        d_mean = float(np.mean(ad.sigmoid_np(logits.data)))
    loss = _objective(ep, scores, manifold, log_d)
    if not np.isfinite(loss.item()):
        raise ad.NonFiniteError("non-finite generator loss")
    grads = ad.backward(tape, loss, leaves)
    gnorm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    new = Generator(gen.mlp.with_params(opt.step(gen.mlp.params, grads)), gen.lo, gen.hi)
    return GeneratorStep(new, eb, loss.item(), gnorm, d_mean, man_mean)
