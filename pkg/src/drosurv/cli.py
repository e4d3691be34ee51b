"""Command-line entry point.

Verbs::

    drosurv run         --config exp.json [--seed S] [--out DIR] [--alpha A] [--method M] [--model M]
    drosurv sweep-alpha --config exp.json [--alphas 0.1,0.5,1.0]
    drosurv evaluate    predictions.csv [--group NAME] [--gamma G] [--out DIR]
    drosurv gradcheck   [--seed S] [--instances N]

Exit codes: 0 success, 2 configuration error, 3 training failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from . import experiment as E
from .data import ParseError, SchemaError, ValidationError
from .train import TrainingError

EXIT_OK, EXIT_CONFIG, EXIT_TRAINING = 0, 2, 3


def _parse_floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="drosurv", description="Fair survival models via chi-square DRO.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    def experiment_flags(p):
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--alpha", type=float, help="fix alpha instead of tuning over the grid")
        p.add_argument("--method", choices=E.METHODS)
        p.add_argument("--model", choices=E.MODELS)

    experiment_flags(sub.add_parser("run", help="repeated train/validate/test protocol"))
    sw = sub.add_parser("sweep-alpha", help="accuracy/fairness table over alpha")
    experiment_flags(sw)
    sw.add_argument("--alphas", type=_parse_floats, help="comma-separated alphas (default: the model's grid)")

    ev = sub.add_parser("evaluate", help="metrics for a predictions CSV")
    ev.add_argument("predictions")
    ev.add_argument("--group")
    ev.add_argument("--gamma", type=float, default=0.01)
    ev.add_argument("--out", help="directory for metrics.csv (default: print only)")

    gc = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--instances", type=int, default=20)
    return parser


def _overrides(args):
    return {"seed": args.seed, "out": args.out, "alpha": args.alpha, "method": args.method, "model": args.model}


def _run(args) -> int:
    cfg = E.load_config(args.config, _overrides(args))
    failed = E.run(cfg)
    print(f"wrote {os.path.join(cfg.out, 'metrics.csv')} ({cfg.repeats - failed}/{cfg.repeats} repeats ok)")
    return EXIT_TRAINING if failed else EXIT_OK


def _sweep(args) -> int:
    cfg = E.load_config(args.config, _overrides(args))
    alphas = args.alphas or list(cfg.default_alpha_grid())
    E.sweep_alpha(cfg, alphas)
    print(f"wrote {os.path.join(cfg.out, 'sweep.csv')} ({len(alphas)} rows)")
    return EXIT_OK


def _evaluate(args) -> int:
    if not os.path.exists(args.predictions):
        raise E.ConfigError(f"no such file: {args.predictions}")
    rep = E.evaluate_file(args.predictions, args.group, args.gamma)
    print(",".join(rep.columns()))
    print(",".join(rep.row()))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        rep.to_csv(os.path.join(args.out, "metrics.csv"))
    return EXIT_OK


def _gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, run_suites

    worst = run_suites(args.seed, args.instances)
    for name, err in worst.items():
        print(f"{'PASS' if err <= TOLERANCE else 'FAIL'} {name}: max relative error {err:.3e}")
    return EXIT_OK if all(e <= TOLERANCE for e in worst.values()) else 1


VERBS = {"run": _run, "sweep-alpha": _sweep, "evaluate": _evaluate, "gradcheck": _gradcheck}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return VERBS[args.verb](args)
    except (E.ConfigError, SchemaError, ParseError, ValidationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_TRAINING


if __name__ == "__main__":
    sys.exit(main())
