"""Seven-row ablation sweep (baseline, +c_i, +c_t, +c_i+c_t, +all at three λ values).

    python3 scripts/run_ablation_sweep.py --out runs/ablation --seeds 0,1,2
    python3 scripts/run_ablation_sweep.py --out runs/ablation --summary-only
"""

import argparse
import logging
import sys
from pathlib import Path

from anyglyph.harness import ExperimentRecipe, run_ablation_sweep, write_summary


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--recipe", default="korean_mini_ablation")
    p.add_argument("--seeds", default="0")
    p.add_argument("--out", default="runs/ablation")
    p.add_argument("--steps", type=int, help="training steps per row (default: recipe)")
    p.add_argument("--sample-steps", type=int)
    p.add_argument("--summary-only", action="store_true", help="rebuild summary.txt from stored reports")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    if not args.summary_only:
        seeds = [int(s) for s in args.seeds.split(",")]
        run_ablation_sweep(ExperimentRecipe.load(args.recipe), seeds, args.out, args.steps, args.sample_steps)
    print(write_summary(Path(args.out)).read_text(encoding="utf-8"), end="")
    return 0


if __name__ == "__main__":
    sys.exit(main())
