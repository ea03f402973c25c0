"""Experiment configuration: YAML/JSON files loaded into validated dataclasses."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .constraints import GROUP_KINDS
from .exploration import SIGNALS, ExplorationParams

VARIANTS = ("basic", "explore", "efficient")


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


@dataclass
class ModelConfig:
    hidden: list[int] = field(default_factory=lambda: [32, 32])
    activation: str = "tanh"
    init_gain: float = 1.0


@dataclass
class LearnerConfig:
    mode: str = "init"
    alpha: float = 0.05
    steps: int = 5
    inner_loss: str = "mse"
    surrogate_lambda: float = 0.0
    hyper_hidden: int = 0
    meta_update: str = "fomaml"


@dataclass
class LevelConfig:
    lam: float = 0.0
    meta_lr: float = 1e-3
    optimizer: str = "adam"
    batch_tasks: int = 5
    n_support: int = 10
    n_query: int = 10
    virtual_count: int = 10
    beta_reg: float = 0.0
    selector_lr: float = 0.05
    gen_lr: float = 1e-3
    disc_lr: float = 1e-2
    gen_batch: int = 8


@dataclass
class ConstraintConfig:
    modules: list[str] = field(default_factory=list)
    n_points: int = 32
    n_elements: int = 4
    virtual_source: str = "auto"
    selector_init: float = 0.0
    offset_scale: float = 1.0
    factor_range: list[float] = field(default_factory=lambda: [0.5, 2.0])


@dataclass
class ExplorationConfig:
    lam_mix: float = 0.5
    delta: float = 0.1
    eps1: float = 0.1
    eps2: float = 0.1
    alpha1: float = -0.2
    alpha2: float = -0.2
    beta: float = 0.0
    gamma: float = 0.0
    gamma_ref: float = 1.0
    signal: str = "smooth"
    loss_mode: str = "post"
    z_dim: int = 4
    hidden: int = 32
    strict: bool = True

    def params(self) -> ExplorationParams:
        return ExplorationParams(
            self.lam_mix, self.delta, self.eps1, self.eps2, self.alpha1, self.alpha2, self.beta, self.gamma, self.gamma_ref
        )


@dataclass
class CurriculumConfig:
    enabled: bool = False
    start: float = 0.25
    end: float = 1.0
    fraction: float = 0.5


@dataclass
class BufferConfig:
    capacity: int = 64
    fraction: float = 0.0
    weighting: str = "uniform"
    temperature: float = 1.0


@dataclass
class ExperimentConfig:
    seed: int = 0
    variant: str = "basic"
    K: int = 2
    rounds: int = 1
    iters_per_level: int = 50
    log_every: int = 1
    record_wall_time: bool = False
    out: str | None = None
    domain: dict = field(default_factory=lambda: {"name": "polynomial"})
    model: ModelConfig = field(default_factory=ModelConfig)
    learner: LearnerConfig = field(default_factory=LearnerConfig)
    levels: list[LevelConfig] = field(default_factory=lambda: [LevelConfig()])
    constraints: ConstraintConfig | None = None
    exploration: ExplorationConfig = field(default_factory=ExplorationConfig)
    curriculum: CurriculumConfig = field(default_factory=CurriculumConfig)
    buffer: BufferConfig = field(default_factory=BufferConfig)

    def level(self, k: int) -> LevelConfig:
        """Settings for level ``k`` (1-based); a single entry applies to every level."""
        return self.levels[0] if len(self.levels) == 1 else self.levels[k - 1]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


_NESTED = {
    "model": ModelConfig,
    "learner": LearnerConfig,
    "exploration": ExplorationConfig,
    "curriculum": CurriculumConfig,
    "buffer": BufferConfig,
    "constraints": ConstraintConfig,
}


def _build(cls, raw: Any, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(raw).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    for key in raw:
        if key not in names:
            raise ConfigError(f"unknown config key '{key}' in {where}")
    try:
        return cls(**raw)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


def from_dict(raw: dict) -> ExperimentConfig:
    """Build and validate a config; unknown keys anywhere raise :class:`ConfigError`."""
    if raw is None:
        raw = {}
    raw = dict(raw)
    top = {f.name for f in dataclasses.fields(ExperimentConfig)}
    for key in raw:
        if key not in top:
            raise ConfigError(f"unknown config key '{key}' at top level")
    kwargs: dict[str, Any] = {}
    for key, value in raw.items():
        if key in _NESTED:
            kwargs[key] = None if value is None and key == "constraints" else _build(_NESTED[key], value or {}, key)
        elif key == "levels":
            items = value if isinstance(value, list) else [value]
            kwargs[key] = [_build(LevelConfig, v, f"levels[{i}]") for i, v in enumerate(items)]
        else:
            kwargs[key] = value
    cfg = ExperimentConfig(**kwargs)
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    _require(isinstance(cfg.seed, int) and cfg.seed >= 0, "seed: must be a non-negative integer")
    _require(cfg.variant in VARIANTS, f"variant: must be one of {VARIANTS}, got {cfg.variant!r}")
    _require(isinstance(cfg.K, int) and cfg.K >= 1, "K: hierarchy depth must be a positive integer")
    _require(cfg.rounds >= 1, "rounds: must be >= 1")
    _require(cfg.iters_per_level >= 0, "iters_per_level: must be >= 0")
    _require(cfg.log_every >= 1, "log_every: must be >= 1")
    _require(isinstance(cfg.domain, dict) and "name" in cfg.domain, "domain: mapping with a 'name' key required")
    _require(cfg.domain["name"] in ("polynomial", "game", "planar"), f"domain.name: unknown domain {cfg.domain['name']!r}")
    _require(len(cfg.levels) in (1, cfg.K), f"levels: give one entry or K={cfg.K} entries, got {len(cfg.levels)}")
    for i, lv in enumerate(cfg.levels):
        where = f"levels[{i}]"
        _require(lv.lam >= 0, f"{where}.lam: virtual weight must be >= 0")
        _require(lv.meta_lr > 0, f"{where}.meta_lr: must be positive")
        _require(lv.optimizer in ("sgd", "adam"), f"{where}.optimizer: 'sgd' or 'adam'")
        _require(lv.batch_tasks >= 1, f"{where}.batch_tasks: must be >= 1")
        _require(lv.n_support >= 1 and lv.n_query >= 1, f"{where}: n_support and n_query must be >= 1")
        _require(lv.virtual_count >= 2, f"{where}.virtual_count: must be >= 2")
        _require(lv.beta_reg >= 0, f"{where}.beta_reg: must be >= 0")
        _require(lv.selector_lr > 0 and lv.gen_lr > 0 and lv.disc_lr > 0, f"{where}: learning rates must be positive")
        _require(lv.gen_batch >= 1, f"{where}.gen_batch: must be >= 1")
    m = cfg.model
    _require(all(isinstance(h, int) and h > 0 for h in m.hidden), "model.hidden: positive integer widths")
    _require(m.activation in ("tanh", "relu", "sigmoid", "identity"), f"model.activation: unsupported {m.activation!r}")
    ln = cfg.learner
    _require(ln.mode in ("init", "hypernetwork"), "learner.mode: 'init' or 'hypernetwork'")
    _require(ln.alpha > 0, "learner.alpha: must be positive")
    _require(isinstance(ln.steps, int) and ln.steps >= 0, "learner.steps: non-negative integer")
    _require(ln.inner_loss in ("mse", "surrogate"), "learner.inner_loss: 'mse' or 'surrogate'")
    _require(ln.surrogate_lambda >= 0, "learner.surrogate_lambda: must be >= 0")
    _require(ln.meta_update in ("fomaml", "reptile"), "learner.meta_update: 'fomaml' or 'reptile'")
    _require(not (ln.meta_update == "reptile" and ln.mode != "init"), "learner.meta_update: reptile needs mode 'init'")
    if cfg.constraints is not None:
        c = cfg.constraints
        _require(len(c.modules) >= 1, "constraints.modules: at least one module")
        for kind in c.modules:
            _require(kind in GROUP_KINDS, f"constraints.modules: unknown module kind {kind!r}")
        _require(c.n_points >= 1 and c.n_elements >= 1, "constraints: n_points and n_elements must be >= 1")
        _require(c.virtual_source in ("auto", "direct", "adversarial"), "constraints.virtual_source: auto|direct|adversarial")
        _require(cfg.domain["name"] != "game", "constraints: symmetry modules do not apply to the game domain")
        planar = any(k in ("rotation_SO2", "translation_R2") for k in c.modules)
        _require(not planar or cfg.domain["name"] == "planar", "constraints.modules: rotation/translation need the planar domain")
    ex = cfg.exploration
    try:
        ep = ex.params()
        if ex.strict:
            ep.check_floors_below_thresholds()
    except ValueError as exc:
        raise ConfigError(f"exploration: {exc}") from None
    _require(ex.signal in SIGNALS, f"exploration.signal: one of {SIGNALS}")
    _require(ex.signal != "entropy", "exploration.signal: entropy needs a softmax-headed learner; regression domains have none")
    _require(ex.loss_mode in ("pre", "post"), "exploration.loss_mode: 'pre' or 'post'")
    cu = cfg.curriculum
    _require(0 < cu.start <= cu.end <= 1.0, "curriculum: need 0 < start <= end <= 1")
    _require(0 < cu.fraction <= 1.0, "curriculum.fraction: in (0, 1]")
    bu = cfg.buffer
    _require(bu.capacity >= 1, "buffer.capacity: must be positive")
    _require(0.0 <= bu.fraction <= 1.0, "buffer.fraction: in [0, 1]")
    _require(bu.weighting in ("uniform", "recency"), "buffer.weighting: 'uniform' or 'recency'")
    _require(bu.temperature > 0, "buffer.temperature: must be positive")


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML/JSON: {exc}") from None
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError("config file must hold a mapping")
    return from_dict(raw or {})
