"""Train one recipe (e.g. mcgan_mini, chinese_mini) on its train styles and evaluate on held-out styles.

    python3 scripts/run_recipe.py mcgan_mini --out runs/mcgan_mini
"""

import argparse
import logging
import sys
from pathlib import Path

from anyglyph.harness import ExperimentRecipe, prepare_dataset, sample_manifest, split_manifest
from anyglyph.metrics import evaluate_pairs
from anyglyph.trainer import train


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("recipe")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int)
    p.add_argument("--out", required=True)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    recipe = ExperimentRecipe.load(args.recipe)
    out = Path(args.out)
    recipe.save(out / "recipe.yaml")
    prepare_dataset(recipe, out / "data")
    cfg = recipe.train_config(args.seed, **({"steps": args.steps} if args.steps else {}))
    cfg.save(out / "config.yaml")
    ckpt = train(cfg, split_manifest(out / "data", "train"), out)
    test = split_manifest(out / "data", "test")
    gen = sample_manifest(ckpt, ckpt.build_model(), test, out / "samples", recipe.sample_steps, args.seed, recipe.sampler)
    report = evaluate_pairs(gen, test, recipe.eval_config(), {"recipe": recipe.name, "seed": args.seed})
    report.save(out / "report.txt")
    print(report.to_text(), end="")
    return 0


if __name__ == "__main__":
    sys.exit(main())
