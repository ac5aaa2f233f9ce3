"""Command-line entry point: ``python -m stsl <command> [options]``."""

from __future__ import annotations

import argparse
import dataclasses
import sys

from . import experiment as ex
from .io import ConfigError
from .samplers import VARIANTS
from .tasks import TASK_FAMILIES
from .verify import SUITES, format_table, run_suites


def _seeds(text):
    try:
        seeds = [int(s, 0) for s in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid seed list {text!r}") from None
    if not seeds or any(s < 0 or s >= 2**64 for s in seeds):
        raise argparse.ArgumentTypeError("seeds must be a nonempty list of u64 values")
    return seeds


def _tasks(text):
    tasks = [t for t in text.replace(",", " ").split()]
    bad = [t for t in tasks if t not in TASK_FAMILIES]
    if not tasks or bad:
        raise argparse.ArgumentTypeError(f"tasks must be drawn from {', '.join(TASK_FAMILIES)}")
    return tasks


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stsl", description="Second-order Tweedie posterior sampling at desk scale.")
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("verify", help="run oracle property suites")
    v.add_argument("--suite", action="append", choices=sorted(SUITES), help="restrict to a suite (repeatable)")

    for name, helptext in (
        ("invert", "posterior sampling on the configured desk tasks"),
        ("bias-study", "paired comparison of stsl, stsl-biased and first-order"),
        ("edit", "inversion followed by a planted component edit"),
        ("sample", "ancestral sampling from the prior"),
    ):
        c = sub.add_parser(name, help=helptext)
        c.add_argument("--config", required=True, help="experiment config file")
        c.add_argument("--seed", type=_seeds, help="comma-separated seeds overriding the config")
        c.add_argument("--outdir", help="output directory overriding the config")
        c.add_argument("--timing", action="store_true", help="record wall times (outputs then differ run to run)")
        if name in ("invert", "bias-study"):
            c.add_argument("--tasks", type=_tasks, help="comma-separated task families")
        if name == "invert":
            c.add_argument("--variant", choices=VARIANTS[:3])
    return p


def _apply_overrides(exp: ex.ExperimentConfig, args) -> ex.ExperimentConfig:
    changes = {}
    if args.seed:
        changes["seeds"] = tuple(args.seed)
    if args.outdir:
        changes["outdir"] = args.outdir
    if getattr(args, "tasks", None):
        changes["tasks"] = tuple(args.tasks)
    return dataclasses.replace(exp, **changes)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "verify":
        checks = run_suites(args.suite)
        print(format_table(checks))
        failed = sum(not c.passed for c in checks)
        print(f"{len(checks) - failed}/{len(checks)} checks passed")
        return 1 if failed else 0

    try:
        exp = _apply_overrides(ex.load_config(args.config), args)
        if args.command == "invert":
            rows = ex.cmd_invert(exp, args.variant, args.timing)
            for r in rows:
                print(f"{r['run_id']}  {r['task']:<10} {r['variant']:<12} seed={r['seed']}  mse={r['mse']:.5f}  psnr={r['psnr']:.2f}")
        elif args.command == "bias-study":
            _, summary = ex.cmd_bias_study(exp, timing=args.timing)
            for s in summary:
                print(f"{s['task']:<10} {s['comparison']:<26} mean={s['mean_diff']:+.2e}  "
                      f"95% CI [{s['ci_low']:+.2e}, {s['ci_high']:+.2e}]")
        elif args.command == "edit":
            if exp.edit is None:
                raise ConfigError("edit needs an [edit] section", path=args.config)
            for r in ex.cmd_edit(exp, args.timing):
                print(f"{r['run_id']}  seed={r['seed']}  mse_to_target={r['mse']:.5f}")
        elif args.command == "sample":
            for d in ex.cmd_sample(exp, args.timing):
                extra = "" if "moments" not in d else f"  moments passed={d['moments']['passed']}"
                print(f"{d['run_id']}  seed={d['seed']}  n={d['n']}{extra}")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
