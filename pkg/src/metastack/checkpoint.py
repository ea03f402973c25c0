"""Checkpoint files: a JSON document whose arrays are base64 little-endian float64 with a shape.

Header keys ``format_version``, ``seed``, ``step`` and ``K`` come first; the rest
holds every piece of mutable trainer state (parameters, optimiser moments,
histories, buffers, random generator states, counters) so a restored run
continues bit for bit.
"""

from __future__ import annotations

import base64
import json
import os
from pathlib import Path

import numpy as np

from .config import from_dict
from .constraints import SelectorWeights
from .exploration import Discriminator, Generator
from .learners import LearnerParams
from .meta import LearnerSnapshot, ReplayBuffer, Trainer
from .nn import Mlp, Optimizer
from .rng import RngStreams
from .tasks import TaskHistory

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


def encode_array(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"__array__": base64.b64encode(a.tobytes()).decode("ascii"), "shape": list(a.shape)}


def decode_array(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["__array__"].encode("ascii"), validate=True)
    shape = tuple(d["shape"])
    if len(raw) != 8 * int(np.prod(shape, dtype=np.int64)):
        raise CorruptCheckpointError("array payload does not match its shape")
    return np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)


def _arrays(xs) -> list[dict]:
    return [encode_array(x) for x in xs]


def _unarrays(xs) -> list[np.ndarray]:
    return [decode_array(x) for x in xs]


def _mlp(m: Mlp) -> dict:
    return {"widths": list(m.widths), "activations": list(m.activations), "params": _arrays(m.params)}


def _unmlp(d: dict) -> Mlp:
    return Mlp(list(d["widths"]), list(d["activations"]), _unarrays(d["params"]))


def _opt(o: Optimizer) -> dict:
    st = o.state_dict()
    st["m"], st["v"] = _arrays(st["m"]), _arrays(st["v"])
    return st


def _unopt(d: dict) -> Optimizer:
    d = dict(d)
    d["m"], d["v"] = _unarrays(d["m"]), _unarrays(d["v"])
    return Optimizer.from_state(d)


def _learner(lp: LearnerParams) -> dict:
    return {
        "init": _mlp(lp.init),
        "alpha": lp.alpha,
        "steps": lp.steps,
        "mode": lp.mode,
        "hyper": None if lp.hyper is None else _mlp(lp.hyper),
        "inner_loss": lp.inner_loss,
        "surrogate_lambda": lp.surrogate_lambda,
    }


def _unlearner(d: dict) -> LearnerParams:
    hyper = None if d["hyper"] is None else _unmlp(d["hyper"])
    return LearnerParams(_unmlp(d["init"]), d["alpha"], d["steps"], d["mode"], hyper, d["inner_loss"], d["surrogate_lambda"])


def _selector(s: SelectorWeights | None):
    return None if s is None else {"weights": encode_array(s.weights), "bias": encode_array(s.bias)}


def _unselector(d) -> SelectorWeights | None:
    return None if d is None else SelectorWeights(decode_array(d["weights"]), decode_array(d["bias"]))


def _child(c):
    if c is None:
        return None
    if isinstance(c, LearnerSnapshot):
        return {"learner": _learner(c.learner), "selector": _selector(c.selector)}
    return {"log_rate": float(c)}


def _unchild(d):
    if d is None:
        return None
    if "log_rate" in d:
        return float(d["log_rate"])
    return LearnerSnapshot(_unlearner(d["learner"]), _unselector(d["selector"]))


def trainer_state(tr: Trainer) -> dict:
    levels = []
    for lv in tr.hier.levels:
        levels.append(
            {
                "index": lv.index,
                "lam": lv.lam,
                "beta_reg": lv.beta_reg,
                "learner": None if lv.learner is None else _learner(lv.learner),
                "selector": None if lv.constraint is None else _selector(lv.constraint.selector),
                "penalty_weights": None if lv.constraint is None else encode_array(lv.constraint.penalty_weights),
                "generator": None if lv.generator is None else _mlp(lv.generator.mlp),
                "discriminator": None if lv.discriminator is None else _mlp(lv.discriminator.mlp),
                "log_rate": lv.log_rate,
                "child": _child(lv.child),
                "opts": {name: _opt(o) for name, o in sorted(lv.opts.items())},
                "history": {"cap": lv.history.cap, "entries": lv.history.to_records()},
                "buffer": lv.buffer.state_dict(),
                "steps_done": lv.steps_done,
            }
        )
    return {
        "format_version": FORMAT_VERSION,
        "seed": tr.cfg.seed,
        "step": tr.step,
        "K": tr.hier.K,
        "config": tr.cfg.to_dict(),
        "counters": {"next_id": tr.next_id, "next_virtual_id": tr.next_virtual_id, "sampler_calls": tr.sampler_calls},
        "events": tr.events,
        "rng": tr.rngs.state_dict(),
        "template": _mlp(tr.hier.template),
        "trace": _arrays(tr.trace),
        "levels": levels,
    }


def load_trainer_state(d: dict) -> Trainer:
    cfg = from_dict(d["config"])
    tr = Trainer(cfg)
    tr.step = int(d["step"])
    c = d["counters"]
    tr.next_id, tr.next_virtual_id, tr.sampler_calls = c["next_id"], c["next_virtual_id"], c["sampler_calls"]
    tr.events = list(d["events"])
    tr.rngs = RngStreams.from_state(d["rng"])
    tr.hier.template = _unmlp(d["template"])
    tr.trace = _unarrays(d["trace"])
    if len(d["levels"]) != tr.hier.K:
        raise CorruptCheckpointError("level count does not match K")
    for lv, st in zip(tr.hier.levels, d["levels"]):
        lv.lam, lv.beta_reg = st["lam"], st["beta_reg"]
        lv.learner = None if st["learner"] is None else _unlearner(st["learner"])
        if lv.constraint is not None:
            lv.constraint.selector = _unselector(st["selector"])
            lv.constraint.penalty_weights = decode_array(st["penalty_weights"])
        if st["generator"] is not None:
            lv.generator = Generator(_unmlp(st["generator"]), lv.generator.lo, lv.generator.hi)
        if st["discriminator"] is not None:
            lv.discriminator = Discriminator(_unmlp(st["discriminator"]), lv.discriminator.lo, lv.discriminator.hi)
        lv.log_rate = st["log_rate"]
        lv.child = _unchild(st["child"])
        lv.opts = {name: _unopt(o) for name, o in st["opts"].items()}
        lv.history = TaskHistory.from_records(st["history"]["entries"], st["history"]["cap"])
        lv.buffer = ReplayBuffer.from_state(st["buffer"])
        lv.steps_done = st["steps_done"]
    return tr


def save_checkpoint(tr: Trainer, path: str | Path) -> None:
    """Write atomically: a temporary sibling file is renamed over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(trainer_state(tr), separators=(",", ":")))
    os.replace(tmp, path)


def read_checkpoint(path: str | Path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CorruptCheckpointError(f"checkpoint {path} is truncated or not JSON: {exc}") from None
    if not isinstance(d, dict) or "format_version" not in d:
        raise CorruptCheckpointError(f"checkpoint {path} lacks a format_version header")
    if d["format_version"] != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint format {d['format_version']} is not supported (expected {FORMAT_VERSION})")
    return d


def restore(path: str | Path) -> Trainer:
    d = read_checkpoint(path)
    try:
        return load_trainer_state(d)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CorruptCheckpointError(f"checkpoint {path} is malformed: {exc!r}") from None
