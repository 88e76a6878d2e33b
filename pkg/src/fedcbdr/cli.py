"""Command-line entry point: ``fedcbdr run | balance-report | grid``."""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import sys
from pathlib import Path

from .config import METHODS, ConfigError, load_config
from .experiment import run_experiment
from .nn import TtsParams
from .report import ReportError, report_buffer_balance

log = logging.getLogger("fedcbdr")


def _apply_overrides(cfg, args):
    changes = {}
    if args.seed is not None:
        changes["seeds"] = [args.seed]
    if args.method is not None:
        changes["methods"] = args.method
    if args.beta is not None:
        if not args.beta > 0:
            raise ConfigError("--beta must be positive")
        changes["beta"] = args.beta
    return cfg.replace(**changes) if changes else cfg


def cmd_run(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    summary = run_experiment(cfg, args.out)
    for method, s in summary["methods"].items():
        print(f"{method}\tmean={s['mean']:.4f}\tstd={s['std']:.4f}\tseeds={s['seeds']}")
    return 0


def cmd_balance(args) -> int:
    rows = report_buffer_balance(args.metrics)
    cols = ["method", "seed", "task", "classes", "min", "max", "std", "total", "missing"]
    print("\t".join(cols))
    for r in rows:
        print("\t".join(json.dumps(r[c]) if c == "missing" else str(r[c]) for c in cols))
    if args.out:
        Path(args.out).write_text(json.dumps(rows, indent=2) + "\n")
    return 0


def cmd_grid(args) -> int:
    base = _apply_overrides(load_config(args.config), args)
    base = base.replace(methods=["FedCBDR"])
    out = Path(args.out)
    cells = []
    grid = itertools.product(args.tau_old or [base.tts.tau_old], args.tau_new or [base.tts.tau_new],
                             args.w_old or [base.tts.w_old], args.w_new or [base.tts.w_new])
    for tau_old, tau_new, w_old, w_new in grid:
        tts = TtsParams(tau_old, tau_new, w_old, w_new)
        name = f"tau_old={tau_old}_tau_new={tau_new}_w_old={w_old}_w_new={w_new}"
        s = run_experiment(base.replace(tts=tts), out / name)["methods"]["FedCBDR"]
        cells.append({"tau_old": tau_old, "tau_new": tau_new, "w_old": w_old, "w_new": w_new,
                      "mean": s["mean"], "std": s["std"]})
        print(f"{name}\tmean={s['mean']:.4f}\tstd={s['std']:.4f}")
    (out / "grid.json").write_text(json.dumps(cells, indent=2) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedcbdr", description="Federated class-incremental replay simulator")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("config", help="experiment config (JSON)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--method", action="append", choices=METHODS,
                        help="method to run; repeat for several")
        sp.add_argument("--beta", type=float)
        sp.add_argument("--out", default="results")

    run = sub.add_parser("run", help="run an experiment")
    common(run)
    run.set_defaults(func=cmd_run)

    bal = sub.add_parser("balance-report", help="per-task replay buffer balance")
    bal.add_argument("metrics")
    bal.add_argument("--out", help="also write the rows as JSON")
    bal.set_defaults(func=cmd_balance)

    grid = sub.add_parser("grid", help="temperature / weight sensitivity sweep")
    common(grid)
    for flag in ("--tau-old", "--tau-new", "--w-old", "--w-new"):
        grid.add_argument(flag, type=float, nargs="+")
    grid.set_defaults(func=cmd_grid)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ReportError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
