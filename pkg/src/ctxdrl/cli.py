"""Command-line entry point: ``ctxdrl {prepare,train,evaluate,grid,compare}``.

Results go to ``--out``; a short ``key=value`` summary is printed on stdout.
Failures print one line ``error exit=<code> type=<name> message=<text>`` on
stderr and exit with 2 (config), 3 (data), 4 (numeric) or 1 (anything else).
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import config as config_mod
from . import pipeline
from .errors import CtxDRLError


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="key = value run config (defaults if omitted)")
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--out", type=Path, default=None, help="output directory (default: config 'out')")
    common.add_argument("--no-figures", action="store_true", help="skip PNG figures")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="ctxdrl", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("prepare", parents=[common], help="load/synthesize, align and split the data")
    sub.add_parser("train", parents=[common], help="train one policy and write checkpoint + log")
    ev = sub.add_parser("evaluate", parents=[common], help="backtest a checkpoint and the baselines on the test range")
    ev.add_argument("--checkpoint", type=Path, required=True)
    gr = sub.add_parser("grid", parents=[common], help="train and evaluate all 32 model configurations")
    gr.add_argument("--workers", type=int, default=None, help="parallel models (default: config grid.workers)")
    cmp_ = sub.add_parser("compare", parents=[common], help="comparison table and with/without-context deltas")
    cmp_.add_argument("reports", nargs="*", type=Path, help="report JSON files (default: <out>/reports/*.json)")
    return p


def _emit(values: dict) -> None:
    for k, v in values.items():
        print(f"{k}={config_mod.format_value(v) if v is not None else 'NA'}")


def _one_line(text: str) -> str:
    return " ".join(str(text).split())


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = config_mod.load(args.config)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        out = args.out if args.out is not None else cfg.resolve(cfg.out)
        figures = not args.no_figures
        if args.command == "prepare":
            _emit(pipeline.run_prepare(cfg, out))
        elif args.command == "train":
            _emit(pipeline.run_train(cfg, out, figures))
        elif args.command == "evaluate":
            _emit(pipeline.run_evaluate(cfg, out, args.checkpoint, figures))
        elif args.command == "grid":
            if args.workers is not None and args.workers < 1:
                raise config_mod.ConfigError("--workers must be >= 1")
            _emit(pipeline.run_grid(cfg, out, args.workers, figures))
        elif args.command == "compare":
            c = pipeline.run_compare(cfg, out, args.reports, figures)
            _emit({"models": len(c.rows), "pairs": len(c.deltas), "mean_annual_return_delta": c.mean_return_delta,
                   "mean_sharpe_delta": c.mean_sharpe_delta})
    except CtxDRLError as exc:
        print(f"error exit={exc.exit_code} type={type(exc).__name__} message={_one_line(exc)}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error exit=3 type={type(exc).__name__} message={_one_line(exc)}", file=sys.stderr)
        return 3
    except Exception as exc:  # noqa: BLE001
        print(f"error exit=1 type={type(exc).__name__} message={_one_line(exc)}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
