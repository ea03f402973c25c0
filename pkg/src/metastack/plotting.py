"""Per-series plot tables and optional matplotlib figures."""

from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Iterable

from .metrics import MetricsRecord, series


def write_tables(records: Iterable[MetricsRecord], out_dir: str | Path, fmt: str = "csv") -> list[Path]:
    """One ``step,value`` table per series; NaN values are written as empty cells."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    delim = "," if fmt == "csv" else "\t"
    paths = []
    for name, rows in series(records).items():
        path = out_dir / f"{name}.{fmt}"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, delimiter=delim, lineterminator="\n")
            w.writerow(["step", "value"])
            for step, value in rows:
                w.writerow([step, "" if value is None or (isinstance(value, float) and math.isnan(value)) else repr(float(value))])
        paths.append(path)
    return paths


def render_figures(records: Iterable[MetricsRecord], out_dir: str | Path) -> list[Path]:
    """Line plot per non-empty series as PNG. Needs matplotlib."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, rows in series(records).items():
        pts = [(s, v) for s, v in rows if v is not None and not math.isnan(v)]
        if not pts:
            continue
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.plot([p[0] for p in pts], [p[1] for p in pts], lw=1.2)
        ax.set_xlabel("step")
        ax.set_ylabel(name)
        ax.grid(alpha=0.3)
        fig.tight_layout()
        path = out_dir / f"{name}.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        paths.append(path)
    return paths
