"""Line-delimited JSON metrics records and run manifests."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Iterator

SCALAR_SERIES = (
    "loss_task",
    "loss_virtual",
    "loss_meta",
    "score_explore_mean",
    "score_explore_max",
    "score_term1_mean",
    "score_term2_mean",
    "d_fake_mean",
    "clamp_rate",
    "loss_gen",
    "loss_disc",
    "gen_grad_norm",
    "inner_lr",
    "wall_time",
)


@dataclass
class MetricsRecord:
    step: int
    level: int
    loss_task: float = math.nan
    loss_virtual: float = math.nan
    loss_meta: float = math.nan
    score_explore_mean: float = math.nan
    score_explore_max: float = math.nan
    score_term1_mean: float = math.nan
    score_term2_mean: float = math.nan
    gate_means: dict[str, float] = field(default_factory=dict)
    pruned: list[str] = field(default_factory=list)
    d_fake_mean: float = math.nan
    clamp_rate: float = math.nan
    loss_gen: float = math.nan
    loss_disc: float = math.nan
    gen_grad_norm: float = math.nan
    inner_lr: float = math.nan
    wall_time: float = 0.0

    def to_json(self) -> str:
        # NaN is written as null so every line is strict JSON
        def clean(v):
            if isinstance(v, float) and not math.isfinite(v):
                return None
            if isinstance(v, dict):
                return {k: clean(x) for k, x in v.items()}
            return v

        return json.dumps({k: clean(v) for k, v in asdict(self).items()}, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "MetricsRecord":
        raw = json.loads(line)
        names = {f.name for f in fields(cls)}
        unknown = set(raw) - names
        if unknown:
            raise ValueError(f"unknown metrics fields {sorted(unknown)}")
        out = {}
        for k, v in raw.items():
            if v is None:
                v = math.nan
            elif k == "gate_means":
                v = {g: (math.nan if x is None else x) for g, x in v.items()}
            out[k] = v
        return cls(**out)


class MetricsWriter:
    """Appends one JSON record per line and flushes after each write."""

    def __init__(self, path: str | Path | None, append: bool = False) -> None:
        self.path = None if path is None else Path(path)
        self.records: list[MetricsRecord] = []
        self._fh = None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self.path, "a" if append else "w", encoding="utf-8")

    def write(self, rec: MetricsRecord) -> None:
        if self.records and rec.step < self.records[-1].step:
            raise ValueError("metrics steps must be non-decreasing")
        self.records.append(rec)
        if self._fh is not None:
            self._fh.write(rec.to_json() + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __enter__(self) -> "MetricsWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_metrics(path: str | Path) -> list[MetricsRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh, 1):
            if line.strip():
                try:
                    out.append(MetricsRecord.from_json(line))
                except (ValueError, TypeError) as exc:
                    raise ValueError(f"{path}:{i}: malformed metrics record: {exc}") from None
    return out


def series(records: Iterable[MetricsRecord]) -> dict[str, list[tuple[int, float]]]:
    """Split records into ``name -> [(step, value)]``; gate means become ``gate_<module>``."""
    records = list(records)
    out: dict[str, list[tuple[int, float]]] = {name: [] for name in SCALAR_SERIES}
    gate_names = sorted({g for r in records for g in r.gate_means})
    for g in gate_names:
        out[f"gate_{g}"] = []
    for r in records:
        for name in SCALAR_SERIES:
            out[name].append((r.step, getattr(r, name)))
        for g in gate_names:
            out[f"gate_{g}"].append((r.step, r.gate_means.get(g, math.nan)))
    return out


def write_manifest(path: str | Path, config_digest: str, seed: int, version: str, extra: dict | None = None) -> None:
    body = {"config_sha256": config_digest, "seed": seed, "version": version}
    body.update(extra or {})
    Path(path).write_text(json.dumps(body, sort_keys=True, indent=2) + "\n")


def iter_lines(records: Iterable[MetricsRecord]) -> Iterator[str]:
    for r in records:
        yield r.to_json()
