"""Command-line front end: train, nash, gradcheck, emit-plot-data, eval.

Exit codes: 0 success, 1 failed gradient check, 2 config or input error,
3 numeric divergence.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, games
from .autodiff import NonFiniteError
from .checkpoint import CheckpointError, restore, save_checkpoint
from .config import ConfigError, load_config
from .constraints import gate_report
from .learners import DivergenceError, LearnerParams
from .meta import Trainer, evaluate_learner
from .metrics import MetricsWriter, read_metrics, write_manifest
from .nn import Mlp

EXIT_OK, EXIT_FAIL, EXIT_INPUT, EXIT_DIVERGED = 0, 1, 2, 3


class Console:
    def __init__(self, quiet: bool = False) -> None:
        self.quiet = quiet

    def info(self, msg: str) -> None:
        if not self.quiet:
            print(msg)

    @staticmethod
    def error(msg: str) -> None:
        print(f"error: {msg}", file=sys.stderr)


def cmd_train(args: argparse.Namespace) -> int:
    con = Console(args.quiet)
    try:
        if args.resume:
            tr = restore(args.resume)
            cfg = tr.cfg
        else:
            cfg = load_config(args.config)
            if args.seed is not None:
                cfg.seed = args.seed
            tr = Trainer(cfg)
    except (ConfigError, CheckpointError) as exc:
        con.error(str(exc))
        return EXIT_INPUT
    out = Path(args.out or cfg.out or "run")
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out / "manifest.json", cfg.digest(), cfg.seed, __version__, {"variant": cfg.variant, "K": cfg.K})
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), sort_keys=True, indent=2) + "\n")
    writer = MetricsWriter(out / "metrics.jsonl", append=bool(args.resume))
    try:
        every = args.checkpoint_every
        while tr.step < tr.total_steps:
            budget = tr.total_steps - tr.step if args.max_steps is None else args.max_steps
            chunk = min(budget, every) if every else budget
            if chunk <= 0:
                break
            tr.run(writer, max_steps=chunk)
            if every:
                save_checkpoint(tr, out / "checkpoint.json")
            if args.max_steps is not None:
                args.max_steps -= chunk
                if args.max_steps <= 0:
                    break
    except (DivergenceError, NonFiniteError) as exc:
        writer.close()
        save_checkpoint(tr, out / "checkpoint_diverged.json")
        con.error(f"training diverged at step {tr.step}: {exc}")
        return EXIT_DIVERGED
    writer.close()
    save_checkpoint(tr, out / "checkpoint.json")
    (out / "events.json").write_text(json.dumps(tr.events, indent=1) + "\n")
    last = writer.records[-1] if writer.records else None
    con.info(f"trained {tr.step}/{tr.total_steps} steps ({cfg.variant}, K={cfg.K}) -> {out}")
    if last is not None:
        con.info(f"last record: step {last.step} level {last.level} loss_meta {last.loss_meta:.6g}")
    return EXIT_OK


def _fmt_profile(g: games.NormalFormGame, prof: games.StrategyProfile) -> str:
    if prof.is_pure:
        return g.label(prof.actions)
    parts = []
    for i, s in enumerate(prof.strategies):
        parts.append("(" + ",".join(f"{g.action_names[i][a]}={p:.6g}" for a, p in enumerate(s)) + ")")
    return "mixed " + "/".join(parts)


def cmd_nash(args: argparse.Namespace) -> int:
    try:
        g = games.load_game(args.game)
        eqs = games.mixed_nash_2x2(g) if g.sizes == (2, 2) and g.n_players == 2 else games.EquilibriumSet(games.pure_nash(g))
    except (games.GameFormatError, ValueError) as exc:
        Console.error(str(exc))
        return EXIT_INPUT
    print(f"game: {g.name or args.game}  class: {games.classify(g) if g.n_players == 2 else 'n/a'}")
    if len(eqs) == 0:
        print("no equilibria found")
    for prof in eqs:
        pay = ", ".join(f"{v:.6g}" for v in games._expected_payoffs(g, prof))
        print(f"{'pure ' if prof.is_pure else ''}{_fmt_profile(g, prof)}  payoffs: {pay}")
    for note in eqs.notes:
        print(f"note: {note}")
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    from .gradcheck import TOLERANCE, run_gradchecks

    results = run_gradchecks(args.seed or 0, broken=args.break_op)
    width = max(len(r.name) for r in results)
    for r in results:
        if not args.quiet or not r.passed:
            print(f"{r.name:<{width}}  max_rel_error={r.max_rel_error:.3e}  {'ok' if r.passed else 'FAIL'}")
    ok = all(r.passed for r in results)
    print(f"{sum(r.passed for r in results)}/{len(results)} components below {TOLERANCE:g}")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_emit_plot_data(args: argparse.Namespace) -> int:
    from .plotting import render_figures, write_tables

    try:
        records = read_metrics(args.metrics)
    except (OSError, ValueError) as exc:
        Console.error(str(exc))
        return EXIT_INPUT
    out = Path(args.out or Path(args.metrics).with_suffix("").as_posix() + "_plots")
    paths = write_tables(records, out, args.format)
    Console(args.quiet).info(f"wrote {len(paths)} tables from {len(records)} records to {out}")
    if args.figures:
        figs = render_figures(records, out)
        Console(args.quiet).info(f"rendered {len(figs)} figures")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    try:
        tr = restore(args.checkpoint)
    except CheckpointError as exc:
        Console.error(str(exc))
        return EXIT_INPUT
    lvl = tr.hier.level(1)
    lp, lc = lvl.learner, tr.cfg.level(1)
    seed = tr.cfg.seed if args.seed is None else args.seed
    rng = np.random.default_rng([seed, 7919])
    try:
        meta_mse = evaluate_learner(lp, tr.domain, np.random.default_rng([seed, 1]), args.tasks, lc.n_support, lc.n_query)
        fresh = Mlp.init(lp.init.widths, lp.init.activations, rng, gain=tr.cfg.model.init_gain)
        base = LearnerParams(fresh, lp.alpha, lp.steps)
        base_mse = evaluate_learner(base, tr.domain, np.random.default_rng([seed, 1]), args.tasks, lc.n_support, lc.n_query)
    except (DivergenceError, NonFiniteError) as exc:
        Console.error(f"evaluation diverged: {exc}")
        return EXIT_DIVERGED
    report = {"step": tr.step, "tasks": args.tasks, "meta_mse": meta_mse, "random_init_mse": base_mse, "ratio": meta_mse / base_mse}
    if lvl.constraint is not None:
        tasks = [tr.domain.sample_task(rng, 10**7 + i) for i in range(args.tasks)]
        rep = gate_report(lvl.constraint, tasks)
        report["gate_means"], report["pruned"] = rep.means, rep.pruned
    print(json.dumps(report, sort_keys=True, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="metastack", description="Recursive meta-learning with virtual-task exploration.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run a configured experiment")
    t.add_argument("--config", help="YAML or JSON experiment config")
    t.add_argument("--seed", type=int, help="override the config seed")
    t.add_argument("--out", help="output directory (metrics, manifest, checkpoint)")
    t.add_argument("--quiet", action="store_true")
    t.add_argument("--resume", help="continue from a checkpoint file")
    t.add_argument("--max-steps", type=int, help="stop after this many steps")
    t.add_argument("--checkpoint-every", type=int, default=0, help="also checkpoint every N steps")
    t.set_defaults(func=cmd_train)

    n = sub.add_parser("nash", help="print the equilibria of a game file")
    n.add_argument("game")
    n.set_defaults(func=cmd_nash)

    g = sub.add_parser("gradcheck", help="compare every backward rule with finite differences")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--quiet", action="store_true")
    g.add_argument("--break-op", help=argparse.SUPPRESS)
    g.set_defaults(func=cmd_gradcheck)

    e = sub.add_parser("emit-plot-data", help="split a metrics file into per-series tables")
    e.add_argument("metrics")
    e.add_argument("--out")
    e.add_argument("--format", choices=("csv", "tsv"), default="csv")
    e.add_argument("--figures", action="store_true", help="also render PNG line plots (needs matplotlib)")
    e.add_argument("--quiet", action="store_true")
    e.set_defaults(func=cmd_emit_plot_data)

    v = sub.add_parser("eval", help="held-out evaluation of a checkpoint")
    v.add_argument("checkpoint")
    v.add_argument("--tasks", type=int, default=50)
    v.add_argument("--seed", type=int)
    v.set_defaults(func=cmd_eval)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "train" and not (args.config or args.resume):
        Console.error("train needs --config or --resume")
        return EXIT_INPUT
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
