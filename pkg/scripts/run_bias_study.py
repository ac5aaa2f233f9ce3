"""Run the paired bias study and print the bootstrap summary.

    python3 scripts/run_bias_study.py [--config configs/bias_study.ini] [--seeds 10] [--outdir DIR]
"""

import argparse
import dataclasses
from pathlib import Path

from stsl.experiment import cmd_bias_study, load_config

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default=ROOT / "configs" / "bias_study.ini")
    ap.add_argument("--seeds", type=int, help="use only the first N configured seeds")
    ap.add_argument("--outdir")
    args = ap.parse_args()

    exp = load_config(args.config)
    if args.seeds:
        exp = dataclasses.replace(exp, seeds=exp.seeds[: args.seeds])
    if args.outdir:
        exp = dataclasses.replace(exp, outdir=args.outdir)
    _, summary = cmd_bias_study(exp)
    print(f"{'task':<12}{'comparison':<28}{'mean diff':>12}{'95% CI':>26}")
    for s in summary:
        ci = f"[{s['ci_low']:+.2e}, {s['ci_high']:+.2e}]"
        print(f"{s['task']:<12}{s['comparison']:<28}{s['mean_diff']:>+12.3e}{ci:>26}")
    print(f"rows and summary written to {Path(exp.outdir) / 'bias_study.csv'}")


if __name__ == "__main__":
    main()
