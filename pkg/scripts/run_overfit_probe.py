"""Overfit probe: train on 1 style × 10 glyphs and check loss decrease plus sampling L1.

    python3 scripts/run_overfit_probe.py --out runs/overfit
    python3 scripts/run_overfit_probe.py --out runs/overfit_l0 --lambda0
"""

import argparse
import logging
import sys

from anyglyph.harness import ExperimentRecipe, run_overfit_probe


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--recipe", default="overfit_probe")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="runs/overfit")
    p.add_argument("--steps", type=int)
    p.add_argument("--lambda0", action="store_true", help="disable the feature-level loss; only the loss check runs")
    p.add_argument("--corrupt", action="store_true", help="flip a byte of the saved checkpoint before reloading")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    overrides = {}
    if args.steps:
        overrides["steps"] = args.steps
    if args.lambda0:
        overrides["lambda"] = 0.0
    report = run_overfit_probe(args.seed, args.out, ExperimentRecipe.load(args.recipe),
                               corrupt_checkpoint=args.corrupt, check_sampling=not args.lambda0, **overrides)
    print(report.to_text(), end="")
    return 0 if report.passed else 1


if __name__ == "__main__":
    sys.exit(main())
