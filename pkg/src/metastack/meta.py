"""The recursive hierarchy: meta-levels, their training loops, promotion and persistence.

Level 1 owns the learner that produces and adapts base models (a shared
initialisation or a hypernetwork), plus the soft constraint, task generator and
discriminator. Every level ``k >= 2`` owns one log step size that governs how the
level below learns: level 2 tunes the inner-loop step size of level 1, level
``k >= 3`` tunes the outer step size of level ``k - 1``. All meta-gradients are
first order.

Training runs ``rounds`` descending passes ``K, K-1, ..., 1``. After a level
``k >= 2`` trains, its step size is handed down; after any level ``k < K`` trains,
its parameters are promoted to level ``k + 1`` as that level's learner snapshot.
"""

from __future__ import annotations

import math
import os
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tape, Tensor
from .config import ExperimentConfig, LevelConfig
from .constraints import (
    SelectorWeights,
    SoftConstraint,
    StructuralModule,
    gate_report,
    sample_virtual_direct,
    selector_gate,
)
from .exploration import (
    Discriminator,
    ExplorationParams,
    Generator,
    VirtualScorer,
    discriminator_update,
    generator_step,
)
from .learners import (
    DivergenceError,
    LearnerParams,
    hypernetwork_meta_grad,
    inner_adapt,
    instantiate,
    loss_and_grad,
    make_hypernetwork,
    task_loss,
    task_loss_tensor,
)
from .metrics import MetricsRecord, MetricsWriter
from .nn import Mlp, Optimizer
from .rng import RngStreams
from .tasks import Dataset, Domain, Task, TaskHistory, make_domain

LOG_RATE_BOUNDS = (math.log(1e-5), 0.0)


# ---- small building blocks ---------------------------------------------------


def composite_meta_loss(
    task_losses: Sequence[float],
    virtual_losses: Sequence[float] = (),
    lam: float = 0.0,
    beta_reg: float = 0.0,
    params: Sequence[np.ndarray] = (),
) -> float:
    """``sum(task) + lam * sum(virtual) + beta_reg * ||params||^2``."""
    if len(task_losses) == 0:
        raise ValueError("composite meta-loss needs at least one task loss")
    if lam < 0 or beta_reg < 0:
        raise ValueError("lam and beta_reg must be non-negative")
    total = float(np.sum(task_losses)) + lam * float(np.sum(virtual_losses))
    if beta_reg:
        total += beta_reg * float(sum(np.sum(p * p) for p in params))
    return total


def virtual_weights(n: int, scheme: str = "uniform", temperature: float = 1.0) -> np.ndarray:
    """Per-virtual-task weights with mean one; ``recency`` favours later items by a softmax."""
    if scheme == "uniform":
        return np.ones(n)
    if scheme == "recency":
        z = np.arange(n, dtype=np.float64) / temperature
        w = np.exp(z - z.max())
        return n * w / w.sum()
    raise ValueError(f"unknown weighting scheme {scheme!r}")


def weighted_virtual_loss(losses: Sequence[float], weights: Sequence[float]) -> float:
    losses, weights = np.asarray(losses, dtype=np.float64), np.asarray(weights, dtype=np.float64)
    if losses.shape != weights.shape:
        raise ValueError("one weight per virtual loss")
    return float(np.mean(weights * losses)) if losses.size else 0.0


@dataclass
class ReplayEntry:
    seq: int
    task: Task
    metrics: dict
    performance: float
    weight: float = 1.0

    def to_record(self) -> dict:
        return {"seq": self.seq, "task": self.task.to_record(), "metrics": self.metrics, "performance": self.performance, "weight": self.weight}

    @classmethod
    def from_record(cls, r: dict) -> "ReplayEntry":
        return cls(r["seq"], Task.from_record(r["task"]), dict(r["metrics"]), r["performance"], r["weight"])


class ReplayBuffer:
    """Bounded FIFO store of visited tasks with their trace metrics and performance ``R = -loss``."""

    def __init__(self, capacity: int) -> None:
        if capacity < 1:
            raise ValueError("buffer capacity must be positive")
        self.capacity = capacity
        self.entries: deque[ReplayEntry] = deque(maxlen=capacity)
        self.seq = 0

    def __len__(self) -> int:
        return len(self.entries)

    def add(self, task: Task, metrics: dict, performance: float, weight: float = 1.0) -> ReplayEntry:
        e = ReplayEntry(self.seq, task, dict(metrics), float(performance), float(weight))
        self.seq += 1
        self.entries.append(e)
        return e

    def sample(self, rng: np.random.Generator, n: int) -> list[ReplayEntry]:
        if n <= 0:
            return []
        if not self.entries:
            raise ValueError("cannot sample from an empty buffer")
        idx = rng.choice(len(self.entries), size=n, replace=n > len(self.entries))
        return [self.entries[int(i)] for i in idx]

    def seqs(self) -> list[int]:
        return [e.seq for e in self.entries]

    def state_dict(self) -> dict:
        return {"capacity": self.capacity, "seq": self.seq, "entries": [e.to_record() for e in self.entries]}

    @classmethod
    def from_state(cls, st: dict) -> "ReplayBuffer":
        b = cls(st["capacity"])
        b.seq = st["seq"]
        for r in st["entries"]:
            b.entries.append(ReplayEntry.from_record(r))
        return b


@dataclass
class CurriculumController:
    """Linear widening of the task-prior box from ``start`` to ``end`` over ``horizon`` steps."""

    start: float = 0.25
    end: float = 1.0
    horizon: int = 1
    enabled: bool = True

    def __post_init__(self) -> None:
        if not 0 < self.start <= self.end:
            raise ValueError("curriculum needs 0 < start <= end")

    def scale(self, step: int) -> float:
        if not self.enabled:
            return 1.0
        frac = min(1.0, max(0, step) / max(1, self.horizon))
        return self.start + (self.end - self.start) * frac


# ---- levels and hierarchy ------------------------------------------------------


@dataclass
class LearnerSnapshot:
    """Level-1 parameters as handed to level 2: the learner and the selector."""

    learner: LearnerParams
    selector: SelectorWeights | None

    def copy(self) -> "LearnerSnapshot":
        return LearnerSnapshot(self.learner.copy(), None if self.selector is None else self.selector.copy())


@dataclass
class MetaLevel:
    index: int
    lam: float = 0.0
    beta_reg: float = 0.0
    learner: LearnerParams | None = None
    constraint: SoftConstraint | None = None
    generator: Generator | None = None
    discriminator: Discriminator | None = None
    log_rate: float | None = None
    child: Any = None
    opts: dict[str, Optimizer] = field(default_factory=dict)
    history: TaskHistory = field(default_factory=TaskHistory)
    buffer: ReplayBuffer = field(default_factory=lambda: ReplayBuffer(64))
    steps_done: int = 0

    def __post_init__(self) -> None:
        if self.lam < 0:
            raise ValueError("virtual weight must be non-negative")
        if self.index < 1:
            raise ValueError("level indices start at 1")

    def trained_params(self):
        """What promotion hands upward."""
        if self.index == 1:
            return LearnerSnapshot(self.learner.copy(), None if self.constraint is None else self.constraint.selector.copy())
        return float(self.log_rate)


@dataclass
class Hierarchy:
    levels: list[MetaLevel]
    template: Mlp

    def __post_init__(self) -> None:
        idx = [lv.index for lv in self.levels]
        if idx != list(range(1, len(idx) + 1)):
            raise ValueError("levels must be indexed 1..K without gaps")

    @property
    def K(self) -> int:
        return len(self.levels)

    def level(self, k: int) -> MetaLevel:
        if not 1 <= k <= self.K:
            raise IndexError(f"no level {k} in a depth-{self.K} hierarchy")
        return self.levels[k - 1]


def promote(hier: Hierarchy, k: int) -> Hierarchy:
    """Copy level ``k``'s trained parameters into level ``k + 1`` as its learner snapshot."""
    if k >= hier.K:
        raise ValueError(f"level {k} is the top of the hierarchy; nothing to promote into")
    hier.level(k + 1).child = hier.level(k).trained_params()
    return hier


def hand_down(hier: Hierarchy, k: int) -> Hierarchy:
    """Install level ``k``'s learned step size in the level below."""
    if k < 2:
        raise ValueError("only levels k >= 2 hold a step size to hand down")
    rate = math.exp(hier.level(k).log_rate)
    below = hier.level(k - 1)
    if k == 2:
        below.learner.alpha = rate
    else:
        below.opts["meta"].lr = rate
    return hier


def _constraint_from(cfg: ExperimentConfig, domain: Domain) -> SoftConstraint | None:
    c = cfg.constraints
    if c is None:
        return None
    mods = [StructuralModule(kind, offset_scale=c.offset_scale, factor_range=tuple(c.factor_range)) for kind in c.modules]
    embed_dim = domain.embed(domain.box()[0]).size
    sel = SelectorWeights(np.zeros((len(mods), embed_dim)), np.full(len(mods), float(c.selector_init)))
    return SoftConstraint(mods, sel, None, c.n_points, c.n_elements)


def _opt(lc: LevelConfig, lr: float | None = None, kind: str | None = None) -> Optimizer:
    return Optimizer(kind or lc.optimizer, lr if lr is not None else lc.meta_lr)


def build_hierarchy(cfg: ExperimentConfig, rngs: RngStreams, domain: Domain) -> Hierarchy:
    widths = [domain.in_dim, *cfg.model.hidden, domain.out_dim]
    template = Mlp.init(widths, cfg.model.activation, rngs("init"), gain=cfg.model.init_gain)
    ln = cfg.learner
    hyper = None
    if ln.mode == "hypernetwork":
        embed_dim = domain.embed(domain.box()[0]).size
        hyper = make_hypernetwork(embed_dim, template, rngs("init/hyper"), hidden=ln.hyper_hidden)
    lp = LearnerParams(template.copy(), ln.alpha, ln.steps, ln.mode, hyper, ln.inner_loss, ln.surrogate_lambda)
    levels = []
    for k in range(1, cfg.K + 1):
        lc = cfg.level(k)
        lv = MetaLevel(k, lc.lam, lc.beta_reg, buffer=ReplayBuffer(cfg.buffer.capacity))
        lv.opts["meta"] = _opt(lc)
        if k == 1:
            lv.learner = lp
            lv.constraint = _constraint_from(cfg, domain)
            ex = cfg.exploration
            lv.generator = Generator.init(domain, rngs("init/gen"), ex.z_dim, ex.hidden)
            lv.discriminator = Discriminator.init(domain, rngs("init/disc"), ex.hidden)
            lv.opts["selector"] = Optimizer("adam", lc.selector_lr)
            lv.opts["gen"] = Optimizer("adam", lc.gen_lr)
            lv.opts["disc"] = Optimizer("adam", lc.disc_lr)
        elif k == 2:
            lv.log_rate = math.log(ln.alpha)
        else:
            lv.log_rate = math.log(cfg.level(k - 1).meta_lr)
        levels.append(lv)
    hier = Hierarchy(levels, template)
    for k in range(1, cfg.K):
        promote(hier, k)
    return hier


# ---- per-task work -------------------------------------------------------------


@dataclass
class TaskPass:
    task: Task
    loss_pre: float
    loss_post: float
    virtual_losses: np.ndarray
    gates: np.ndarray
    grad: list[np.ndarray]
    adapted: Any


@dataclass
class TaskData:
    task: Task
    support: Dataset
    query: Dataset
    v_support: list[Dataset]
    v_query: list[Dataset]


def _adapt_eval(lp: LearnerParams, td: TaskData, gates: np.ndarray, lam: float) -> TaskPass:
    """Adapt on support (plus gated virtual support), then differentiate the query objective at the adapted weights."""
    model = instantiate(lp, td.task)
    loss_pre = task_loss(model, td.query)
    extra = [(lam * float(gates[m]), vs) for m, vs in enumerate(td.v_support)]
    adapted = inner_adapt(lp, model, td.support, extra, task_id=td.task.id)
    tape = Tape()
    leaves = tape.leaves(adapted.model.params)
    acts = adapted.model.activations
    total = task_loss_tensor(leaves, acts, td.query)
    vls = []
    for m, vq in enumerate(td.v_query):
        vl = task_loss_tensor(leaves, acts, vq)
        vls.append(vl.item())
        total = total + (lam * float(gates[m])) * vl
    if not np.isfinite(total.item()):
        raise DivergenceError(f"non-finite query objective on task {td.task.id}")
    grad = ad.backward(tape, total, leaves)
    return TaskPass(td.task, loss_pre, task_loss(adapted.model, td.query), np.array(vls), gates, grad, adapted)


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("METASTACK_THREADS", "1")))
    except ValueError:
        return 1


def _map(fn: Callable, items: Sequence) -> list:
    """Order-preserving map; fans out to threads when ``METASTACK_THREADS`` > 1."""
    n = _threads()
    if n == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


# ---- the trainer -----------------------------------------------------------------


@dataclass
class StepResult:
    level: int
    loss_meta: float
    record: MetricsRecord


class Trainer:
    """Owns all mutable training state and runs the level schedule step by step."""

    def __init__(self, cfg: ExperimentConfig) -> None:
        self.cfg = cfg
        self.domain = make_domain(cfg.domain["name"], **{k: v for k, v in cfg.domain.items() if k != "name"})
        self.rngs = RngStreams(cfg.seed)
        self.hier = build_hierarchy(cfg, self.rngs, self.domain)
        self.ep: ExplorationParams = cfg.exploration.params()
        self.step = 0
        self.next_id = 0
        self.next_virtual_id = -1
        self.sampler_calls = 0
        self.events: list[dict] = []
        self.trace: list[np.ndarray] = []
        total_l1 = cfg.rounds * cfg.iters_per_level
        cu = cfg.curriculum
        self.curriculum = CurriculumController(
            cu.start, cu.end, max(1, int(round(cu.fraction * total_l1))), cu.enabled and cfg.variant == "efficient"
        )

    # -- schedule --

    @property
    def total_steps(self) -> int:
        return self.cfg.rounds * self.hier.K * self.cfg.iters_per_level

    def position(self, step: int) -> tuple[int, int, int]:
        """(round, level, iteration) of a global step; levels run K down to 1 within a round."""
        per_level = self.cfg.iters_per_level
        per_round = per_level * self.hier.K
        r, rem = divmod(step, per_round)
        slot, it = divmod(rem, per_level)
        return r, self.hier.K - slot, it

    def run(self, writer: MetricsWriter | None = None, max_steps: int | None = None) -> list[MetricsRecord]:
        stop = self.total_steps if max_steps is None else min(self.total_steps, self.step + max_steps)
        out = []
        while self.step < stop:
            r, k, it = self.position(self.step)
            if it == 0:
                self.events.append({"event": "train_level", "round": r, "level": k, "step": self.step})
            res = self.train_step(k)
            if writer is not None and (self.step % self.cfg.log_every == 0 or it == self.cfg.iters_per_level - 1):
                writer.write(res.record)
            out.append(res.record)
            self.step += 1
            if it == self.cfg.iters_per_level - 1:
                self._finish_level(k)
        return out

    def _finish_level(self, k: int) -> None:
        if k >= 2:
            hand_down(self.hier, k)
            self.events.append({"event": "hand_down", "level": k, "step": self.step})
        if k < self.hier.K:
            promote(self.hier, k)
            self.events.append({"event": "promote", "level": k, "step": self.step})

    def train_step(self, k: int) -> StepResult:
        t0 = time.perf_counter()
        lvl = self.hier.level(k)
        res = self._level1_step(lvl) if k == 1 else self._rate_step(lvl)
        lvl.steps_done += 1
        if not np.isfinite(res.loss_meta):
            raise DivergenceError(f"non-finite meta-loss at step {self.step} (level {k})")
        if self.cfg.record_wall_time:
            res.record.wall_time = time.perf_counter() - t0
        return res

    # -- sampling --

    def _new_id(self) -> int:
        self.next_id += 1
        return self.next_id - 1

    def _fresh_tasks(self, k: int, n: int, scale: float = 1.0) -> list[Task]:
        rng = self.rngs(f"tasks/{k}")
        out = []
        for _ in range(n):
            self.sampler_calls += 1
            out.append(self.domain.sample_task(rng, self._new_id(), scale))
        return out

    def _task_data(self, k: int, task: Task, lc: LevelConfig, sc: SoftConstraint | None, direct: bool) -> TaskData:
        rng = self.rngs(f"data/{k}")
        support = self.domain.dataset(task, rng, lc.n_support)
        query = self.domain.dataset(task, rng, lc.n_query)
        vs, vq = [], []
        if direct:
            vrng = self.rngs(f"virtual/{k}")
            half = lc.virtual_count // 2
            for m in sc.modules:
                vs.append(sample_virtual_direct(m, support, vrng, half))
                vq.append(sample_virtual_direct(m, query, vrng, lc.virtual_count - half))
        return TaskData(task, support, query, vs, vq)

    def _virtual_source(self, sc: SoftConstraint | None) -> str:
        if sc is None:
            return "none"
        src = self.cfg.constraints.virtual_source
        if src == "auto":
            return "direct" if sc.tractable else "adversarial"
        return src

    # -- level 1 --

    def _level1_step(self, lvl: MetaLevel) -> StepResult:
        cfg, lc = self.cfg, self.cfg.level(1)
        efficient = cfg.variant == "efficient"
        lp, sc = lvl.learner, lvl.constraint
        source = self._virtual_source(sc)
        direct = source == "direct" and lvl.lam > 0
        adversarial = cfg.variant == "explore" or source == "adversarial"
        B = lc.batch_tasks

        tasks = self._batch_tasks(lvl, lc, efficient)
        data = [self._task_data(1, t, lc, sc, direct) for t in tasks]
        gates = [selector_gate(sc.selector, t) if sc is not None else np.zeros(0) for t in tasks]
        passes = _map(lambda i: _adapt_eval(lp, data[i], gates[i], lvl.lam), list(range(B)))

        # generator-made virtual tasks enter the meta objective with weight lam
        gen_losses, gen_grads, gen_w = [], [], np.zeros(0)
        if adversarial and lvl.lam > 0:
            gen_losses, gen_grads = self._generator_virtual(lvl, lc)
            gen_w = virtual_weights(len(gen_losses), cfg.buffer.weighting if efficient else "uniform", cfg.buffer.temperature)

        meta_grads = self._meta_grads(lvl, passes, gen_grads, gen_w)
        phi = lp.meta_params
        if efficient and lvl.beta_reg:
            meta_grads = [g + 2.0 * lvl.beta_reg * p for g, p in zip(meta_grads, phi)]
        sel_loss_grads = self._selector_grads(lvl, passes) if (sc is not None and direct) else None

        task_losses = [p.loss_post for p in passes]
        gen_virtual = weighted_virtual_loss(gen_losses, gen_w) if len(gen_losses) else 0.0
        per_task_virtual = [
            float(np.dot(p.gates, p.virtual_losses)) + gen_virtual if p.virtual_losses.size else gen_virtual for p in passes
        ]
        loss_meta = composite_meta_loss(task_losses, per_task_virtual, lvl.lam, lvl.beta_reg if efficient else 0.0, phi)
        if not np.isfinite(loss_meta):
            raise DivergenceError(f"non-finite meta-loss at step {self.step} (level 1)")

        lvl.learner = lp.with_meta_params(lvl.opts["meta"].step(phi, meta_grads))
        if sel_loss_grads is not None:
            new = lvl.opts["selector"].step(sc.selector.params, sel_loss_grads)
            sc.selector = SelectorWeights(new[0], new[1])

        for p in passes:
            lvl.history.append(p.task, p.loss_pre if cfg.exploration.loss_mode == "pre" else p.loss_post, self.step)
            if efficient:
                lvl.buffer.add(p.task, {"loss_pre": p.loss_pre, "loss_post": p.loss_post}, -p.loss_post)

        rec = MetricsRecord(self.step, 1)
        rec.loss_task = float(np.mean(task_losses))
        rec.loss_virtual = float(np.mean(per_task_virtual))
        rec.loss_meta = loss_meta
        rec.inner_lr = lvl.learner.alpha
        rec.gen_grad_norm = 0.0
        if sc is not None:
            rep = gate_report(sc, tasks)
            rec.gate_means, rec.pruned = rep.means, rep.pruned

        if adversarial:
            self._generator_and_discriminator(lvl, lc, tasks, rec, score_weight=1.0 if cfg.variant == "explore" else 0.0)
        self.trace.append(nn.flatten(lvl.learner.meta_params))
        return StepResult(1, loss_meta, rec)

    def _batch_tasks(self, lvl: MetaLevel, lc: LevelConfig, efficient: bool) -> list[Task]:
        B = lc.batch_tasks
        if not efficient:
            return self._fresh_tasks(1, B)
        scale = self.curriculum.scale(lvl.steps_done)
        n_replay = int(round(self.cfg.buffer.fraction * B)) if len(lvl.buffer) >= B else 0
        replayed = [e.task for e in lvl.buffer.sample(self.rngs("replay/1"), n_replay)]
        return self._fresh_tasks(1, B - n_replay, scale) + replayed

    def _meta_grads(self, lvl: MetaLevel, passes: list[TaskPass], gen_grads, gen_w) -> list[np.ndarray]:
        lp = lvl.learner
        reptile = self.cfg.learner.meta_update == "reptile"
        acc = [np.zeros_like(p) for p in lp.meta_params]
        for p in passes:
            if reptile:
                g = [a - b for a, b in zip(lp.init.params, p.adapted.model.params)]
            elif lp.mode == "hypernetwork":
                g = hypernetwork_meta_grad(lp, p.task, p.grad)
            else:
                g = p.grad
            for a, gi in zip(acc, g):
                a += gi
        n = len(passes)
        out = [a / n for a in acc]
        for w, (task, g) in zip(gen_w, gen_grads):
            if reptile:
                g = [a - b for a, b in zip(lp.init.params, g)]
            elif lp.mode == "hypernetwork":
                g = hypernetwork_meta_grad(lp, task, g)
            for o, gi in zip(out, g):
                o += (lvl.lam * w / len(gen_grads)) * gi
        return out

    def _selector_grads(self, lvl: MetaLevel, passes: list[TaskPass]) -> list[np.ndarray]:
        """Selector gradient: direct virtual-loss term plus the first-order hypergradient through adaptation."""
        lam, alpha = lvl.lam, lvl.learner.alpha
        sel = lvl.constraint.selector
        gw, gb = np.zeros_like(sel.weights), np.zeros_like(sel.bias)
        for p in passes:
            s = p.gates
            dj_ds = np.empty_like(s)
            for m in range(s.size):
                through = sum(float(np.sum(g * G)) for g, G in zip(p.grad, p.adapted.extra_grad_sums[m]))
                dj_ds[m] = lam * p.virtual_losses[m] - alpha * lam * through
            dlogit = dj_ds * s * (1.0 - s)
            gw += np.outer(dlogit, p.task.embedding)
            gb += dlogit
        n = len(passes)
        return [gw / n, gb / n]

    def _generator_virtual(self, lvl: MetaLevel, lc: LevelConfig) -> tuple[list[float], list]:
        rng = self.rngs("gen/1")
        z = lvl.generator.sample_latents(rng, lc.gen_batch)
        _, clamped = lvl.generator.decode(z)
        losses, grads = [], []
        drng = self.rngs("virtual-data/1")
        reptile = self.cfg.learner.meta_update == "reptile"
        for row in clamped.data:
            task = self.domain.make_task(row, self.next_virtual_id)
            self.next_virtual_id -= 1
            td = TaskData(task, self.domain.dataset(task, drng, lc.n_support), self.domain.dataset(task, drng, lc.n_query), [], [])
            p = _adapt_eval(lvl.learner, td, np.zeros(0), 0.0)
            losses.append(p.loss_post)
            grads.append((task, p.adapted.model.params if reptile else p.grad))
        return losses, grads

    def _generator_and_discriminator(self, lvl: MetaLevel, lc: LevelConfig, tasks: list[Task], rec: MetricsRecord, score_weight: float) -> None:
        ex = self.cfg.exploration
        scorer = VirtualScorer(lvl.learner, self.domain, self.ep, lvl.history, ex.signal, ex.loss_mode, lc.n_support, lc.n_query)
        rng = self.rngs("explore/1")
        sc = lvl.constraint
        man = None
        if sc is not None and self.ep.beta > 0:
            pts = self.domain.collocation_points(rng, sc.n_points)
            man = (pts, [m.sample_elements(rng, sc.n_elements) for m in sc.modules])
        disc = lvl.discriminator if self.ep.gamma > 0 else None
        st = generator_step(
            lvl.generator, scorer, self.ep, rng, lc.gen_batch, lvl.opts["gen"], disc, sc if man else None, man,
            first_id=self.next_virtual_id, score_weight=score_weight,
        )
        self.next_virtual_id -= lc.gen_batch
        lvl.generator = st.generator
        real = np.stack([self.domain.params_of(t) for t in tasks])
        lvl.discriminator, dloss = discriminator_update(lvl.discriminator, real, st.batch.params, opt=lvl.opts["disc"])
        rec.loss_gen = st.loss
        rec.gen_grad_norm = st.grad_norm
        rec.score_explore_mean = st.batch.mean_score
        rec.score_explore_max = float(np.max(st.batch.scores))
        rec.score_term1_mean, rec.score_term2_mean = st.batch.term_means()
        rec.clamp_rate = st.batch.clamp_rate
        rec.d_fake_mean = float(np.mean(lvl.discriminator.prob(st.batch.params)))
        rec.loss_disc = dloss

    # -- levels k >= 2 --

    def _level1_snapshot(self, k: int) -> LearnerSnapshot:
        """Level-1 parameters as seen from level ``k`` (via the promoted snapshot held by level 2)."""
        return self.hier.level(2).child

    def _inner_rate_grad(self, k: int, log_alpha: float) -> tuple[float, float]:
        """d(query objective)/d(log alpha) for level 1 at a frozen initialisation, first order."""
        lc = self.cfg.level(2)
        snap = self._level1_snapshot(k)
        lp = snap.learner.copy()
        lp.alpha = math.exp(log_alpha)
        lvl1 = self.hier.level(1)
        sc = None
        if lvl1.constraint is not None and snap.selector is not None:
            sc = lvl1.constraint.copy()
            sc.selector = snap.selector.copy()
        direct = self._virtual_source(sc) == "direct" and self.hier.level(2).lam > 0
        tasks = self._fresh_tasks(k, lc.batch_tasks)
        data = [self._task_data(k, t, lc, sc, direct) for t in tasks]
        gates = [selector_gate(sc.selector, t) if sc is not None else np.zeros(0) for t in tasks]
        lam = self.hier.level(2).lam
        passes = _map(lambda i: _adapt_eval(lp, data[i], gates[i], lam), list(range(len(tasks))))
        dalpha = 0.0
        for p in passes:
            dalpha -= sum(float(np.sum(g * s)) for g, s in zip(p.grad, p.adapted.grad_sum))
        dalpha /= len(passes)
        loss = float(np.mean([p.loss_post + lam * float(np.dot(p.gates, p.virtual_losses)) for p in passes]))
        return lp.alpha * dalpha, loss

    def _rate_grad(self, j: int, k: int, x: float) -> tuple[float, float]:
        """Gradient of level ``j``'s objective in its own log rate ``x``, evaluated for owner level ``k``."""
        if j == 2:
            return self._inner_rate_grad(k, x)
        # level j tunes level j-1's outer step size: hypergradient of two consecutive updates
        y = float(self.hier.level(j).child)
        g1, _ = self._rate_grad(j - 1, k, y)
        y1 = float(np.clip(y - math.exp(x) * g1, *LOG_RATE_BOUNDS))
        g2, loss = self._rate_grad(j - 1, k, y1)
        return -math.exp(x) * g2 * g1, loss

    def _rate_step(self, lvl: MetaLevel) -> StepResult:
        k = lvl.index
        grad, loss = self._rate_grad(k, k, lvl.log_rate)
        if not np.isfinite(grad):
            raise DivergenceError(f"non-finite step-size hypergradient at level {k}")
        new = lvl.opts["meta"].step([np.array([lvl.log_rate])], [np.array([grad])])[0]
        lvl.log_rate = float(np.clip(new[0], *LOG_RATE_BOUNDS))
        if k >= 3:
            # advance the snapshot of the level below along its own update
            y = float(lvl.child)
            g, _ = self._rate_grad(k - 1, k, y)
            lvl.child = float(np.clip(y - math.exp(lvl.log_rate) * g, *LOG_RATE_BOUNDS))
        rec = MetricsRecord(self.step, k)
        rec.loss_task = loss
        rec.loss_meta = loss
        rec.loss_virtual = 0.0
        rec.inner_lr = math.exp(lvl.log_rate)
        return StepResult(k, loss, rec)


# ---- evaluation and reference ---------------------------------------------------------


def evaluate_learner(
    lp: LearnerParams, domain: Domain, rng: np.random.Generator, n_tasks: int, n_support: int, n_query: int, first_id: int = 10**6
) -> float:
    """Mean query MSE after inner adaptation over freshly sampled tasks."""
    losses = []
    for i in range(n_tasks):
        task = domain.sample_task(rng, first_id + i)
        support, query = domain.dataset(task, rng, n_support), domain.dataset(task, rng, n_query)
        adapted = inner_adapt(lp, instantiate(lp, task), support, task_id=task.id)
        losses.append(task_loss(adapted.model, query))
    return float(np.mean(losses))


def first_order_maml_reference(cfg: ExperimentConfig, steps: int) -> list[np.ndarray]:
    """Plain first-order meta-learning of an initialisation, written independently of :class:`Trainer`.

    Uses the same seeded streams, so a single-level trainer with no virtual data
    must reproduce this trajectory exactly.
    """
    domain = make_domain(cfg.domain["name"], **{k: v for k, v in cfg.domain.items() if k != "name"})
    rngs = RngStreams(cfg.seed)
    widths = [domain.in_dim, *cfg.model.hidden, domain.out_dim]
    model = Mlp.init(widths, cfg.model.activation, rngs("init"), gain=cfg.model.init_gain)
    lc = cfg.level(1)
    opt = Optimizer(lc.optimizer, lc.meta_lr)
    alpha, inner = cfg.learner.alpha, cfg.learner.steps
    theta = [p.copy() for p in model.params]
    task_rng, data_rng = rngs("tasks/1"), rngs("data/1")
    next_id = 0
    trace = []
    for _ in range(steps):
        tasks = []
        for _ in range(lc.batch_tasks):
            tasks.append(domain.sample_task(task_rng, next_id))
            next_id += 1
        meta = [np.zeros_like(p) for p in theta]
        for task in tasks:
            support = domain.dataset(task, data_rng, lc.n_support)
            query = domain.dataset(task, data_rng, lc.n_query)
            fast = model.with_params([p.copy() for p in theta])
            for _ in range(inner):
                _, g = loss_and_grad(fast, support)
                fast = fast.with_params([p - alpha * gi for p, gi in zip(fast.params, g)])
            _, gq = loss_and_grad(fast, query)
            for m, gi in zip(meta, gq):
                m += gi
        theta = opt.step(theta, [m / len(tasks) for m in meta])
        trace.append(nn.flatten(theta))
    return trace
