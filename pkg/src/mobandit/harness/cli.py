"""Command-line front end.

Exit codes: 0 success, 1 verification failure, 2 usage or configuration
error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .. import calculus as calc
from .. import oracle, toy
from ..train import NumericalAbort, run_experiment, score_table
from . import io, presets, verify
from .config import ConfigError, load_config, preset_config

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_ABORT = 0, 1, 2, 3

log = logging.getLogger("mobandit")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageExit(f"{self.prog}: error: {message}")


class _UsageExit(SystemExit):
    def __init__(self, message):
        super().__init__(EXIT_USAGE)
        self.message = message


def _load(source: str):
    if source in presets.EXPERIMENT_PRESETS:
        return preset_config(source)
    if Path(source).exists():
        return load_config(source)
    raise ConfigError(f"{source!r} is neither a config file nor a preset ({', '.join(presets.EXPERIMENT_PRESETS)})")


def _display(records, M, window):
    if not records:
        return
    r = np.array([rec.rewards for rec in records])
    smooth = np.column_stack([io.moving_average(r[:, m], window) for m in range(M)])
    last = records[-1]
    print(
        f"step {last.step}: V={last.value:.6g} "
        + " ".join(f"r_{m}={smooth[-1, m]:.6g}" for m in range(M))
        + f" (moving average, window {window})"
    )


def cmd_run(args) -> int:
    cfg = _load(args.config)
    env, rewards, policy = cfg.env_spec(), cfg.reward_table(), cfg.initial_policy()
    tcfg = cfg.train_config(args.seed)
    out = cfg.output_path(args.output)
    M = rewards.num_objectives
    records = []
    with io.TrajectoryWriter(out, M, cfg.output.format, cfg.output.flush_every) as writer:
        try:
            result = run_experiment(env, rewards, tcfg, policy=policy, callback=writer.write)
            records = result.records
        except NumericalAbort as exc:
            dump = out.with_name(out.name + ".abort.json")
            dump.write_text(json.dumps(exc.dump, indent=2), encoding="utf-8")
            print(f"numerical abort: {exc}; diagnostic dump written to {dump}", file=sys.stderr)
            return EXIT_ABORT
    _display(records, M, args.window)
    print(f"wrote {len(records)} records to {out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    names = list(verify.SUITES) if args.suite == "all" else [args.suite]
    results = verify.run_suites(names)
    for res in results:
        print(res.line())
    failed = [r.name for r in results if not r.passed]
    print("all suites passed" if not failed else f"failed suites: {', '.join(failed)}")
    return EXIT_OK if not failed else EXIT_VERIFY


def cmd_toy(args) -> int:
    if not 0.0 < args.p0 < 1.0:
        print(f"p0 must lie strictly inside (0, 1), got {args.p0}", file=sys.stderr)
        return EXIT_USAGE
    try:
        cfg = toy.TwoModeConfig(args.p0, args.s_good, args.s_bad, args.r_good, args.r_bad, args.eta, args.steps)
    except ValueError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    table = toy.trajectory_table(cfg)
    out = Path(args.out) if args.out else None
    rows = zip(table["t"], table["p_t"], table["expected_r"], table["covariance"])
    header = ["t", "p_t", "expected_r", "covariance"]
    fh = open(out, "w", newline="", encoding="utf-8") if out else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\r\n" if out else "\n")
        w.writerow(header)
        for row in rows:
            w.writerow([io.fmt(v) for v in row])
    finally:
        if out:
            fh.close()
    return EXIT_OK


def cmd_sweep(args) -> int:
    etas = [float(e) for e in args.etas]
    if len(etas) < 3:
        print("need at least three etas", file=sys.stderr)
        return EXIT_USAGE
    if any(b >= a for a, b in zip(etas, etas[1:])) or etas[-1] <= 0:
        print("etas must be positive and strictly decreasing", file=sys.stderr)
        return EXIT_USAGE
    cfg = _load(args.config)
    rewards, policy = cfg.reward_table(), cfg.initial_policy()
    from ..scalarize import make_controller

    tcfg = cfg.train_config(args.seed)
    ctl = make_controller(tcfg.controller, rewards.num_objectives, tcfg.controller_params)
    s = score_table(ctl, rewards)
    all_pass = True
    print("objective,eta,residual,ratio,verdict")
    for m in range(rewards.num_objectives):
        residuals = [calc.covariance_law_check(policy, rewards, s, e).residual[m] for e in etas]
        res = oracle.order_check_values(etas, residuals)
        all_pass &= res.passed
        ratio_iter = iter(res.ratios.tolist())
        for i, (e, r) in enumerate(zip(etas, residuals)):
            ratio = "" if i == 0 or res.degenerate else io.fmt(next(ratio_iter, float("nan")))
            print(f"{m},{io.fmt(e)},{io.fmt(r)},{ratio},{res.verdict}")
    return EXIT_OK if all_pass else EXIT_VERIFY


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mobandit", description="Multi-objective scalarization testbed on tabular policies.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="run an experiment from a config file or preset name")
    run.add_argument("config")
    run.add_argument("--seed", type=int, default=None, help="override the config seed")
    run.add_argument("--output", default=None, help="output path (relative paths use $MOBANDIT_OUTPUT_DIR)")
    run.add_argument(
        "--window", type=int, default=10,
        help="moving-average window for the console summary only (10 is a guess; files are raw)",
    )
    run.set_defaults(func=cmd_run)

    ver = sub.add_parser("verify", help="run oracle-backed verification suites")
    ver.add_argument("suite", choices=["all", *verify.SUITES])
    ver.set_defaults(func=cmd_verify)

    ty = sub.add_parser("toy", help="closed-form two-mode trajectory as CSV")
    ty.add_argument("--p0", type=float, default=0.5)
    ty.add_argument("--s-good", type=float, default=0.0)
    ty.add_argument("--s-bad", type=float, default=1.0)
    ty.add_argument("--r-good", type=float, default=1.0)
    ty.add_argument("--r-bad", type=float, default=0.0)
    ty.add_argument("--eta", type=float, default=0.1)
    ty.add_argument("--steps", type=int, default=200)
    ty.add_argument("--out", default=None)
    ty.set_defaults(func=cmd_toy)

    sw = sub.add_parser("sweep", help="step-size order check of the covariance law")
    sw.add_argument("config")
    sw.add_argument("--etas", nargs="+", default=["1e-2", "5e-3", "2.5e-3"])
    sw.add_argument("--seed", type=int, default=None)
    sw.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageExit as exc:
        print(exc.message, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
