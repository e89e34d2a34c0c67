"""``anyglyph`` command line: synth-data, train, sample, eval, grid.

Exit codes: 0 success, 2 usage error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import torch
import yaml

from . import glyph_synth as gs
from .config import TrainConfig
from .errors import AnyGlyphError
from .metrics import EvalConfig, evaluate_pairs

log = logging.getLogger("anyglyph")


class UsageError(Exception):
    pass


def expand_chars(spec: str) -> list[str]:
    """``A..Z`` expands to the inclusive code-point range; anything else is a literal char list."""
    if len(spec) == 4 and spec[1:3] == "..":
        lo, hi = ord(spec[0]), ord(spec[3])
        if hi < lo:
            raise UsageError(f"empty range {spec!r}")
        return [chr(c) for c in range(lo, hi + 1)]
    return [ch for ch in spec if not ch.isspace()]


def write_snapshot(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(payload, sort_keys=True, allow_unicode=True), encoding="utf-8")


def _args_dict(args) -> dict:
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth_data(args) -> int:
    if args.charset is None and args.preset is None:
        raise UsageError("one of --charset or --preset is required")
    out = Path(args.out)
    write_snapshot(out / "run_config.yaml", {"subcommand": "synth-data", **_args_dict(args)})
    charset = gs.load_charset(args.preset or args.charset)
    manifest = gs.build_dataset(charset, args.styles, args.seed, args.split, out, args.canvas, args.font)
    print(f"wrote {len(manifest)} samples to {out / 'manifest.jsonl'}")
    return 0


def resolve_config(args) -> TrainConfig:
    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    try:
        return cfg.with_overrides(args.override)
    except KeyError as e:
        raise UsageError(str(e.args[0])) from None
    except ValueError as e:
        raise UsageError(str(e)) from None


def cmd_train(args) -> int:
    from .trainer import load_checkpoint, train

    cfg = resolve_config(args)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.seed]
    manifest = gs.Manifest.load(args.data)
    out = Path(args.out)
    for seed in seeds:
        run_cfg = cfg.replace(seed=seed)
        run_dir = out if len(seeds) == 1 else out / f"seed_{seed}"
        write_snapshot(run_dir / "run_config.yaml", {"subcommand": "train", "args": _args_dict(args), "config": run_cfg.to_dict()})
        run_cfg.save(run_dir / "config.yaml")
        resume = load_checkpoint(args.resume) if args.resume else None
        ckpt = train(run_cfg, manifest, run_dir, resume=resume)
        last = ckpt.trace[-1] if ckpt.trace else {}
        print(f"seed {seed}: {ckpt.step} steps, final L_total {last.get('L_total', float('nan')):.5f} -> {run_dir / 'final.agc'}")
    return 0


def _load_model(path):
    from .trainer import load_checkpoint

    ckpt = load_checkpoint(path)
    return ckpt, ckpt.build_model()


def generate(model, ckpt, lg: np.ndarray, lr: np.ndarray, prompts, steps, seed, sampler, eta=0.0, chunk=32) -> np.ndarray:
    """Batched sampling helper: N×H×W×3 arrays in, N×H×W×3 array out."""
    from .diffusion import sample
    from .model import to_batch, to_images

    outs = []
    for i in range(0, len(lg), chunk):
        x = sample(model, to_batch(lg[i : i + chunk]), to_batch(lr[i : i + chunk]), list(prompts[i : i + chunk]),
                   ckpt.schedule, num_steps=steps, seed=seed + i, sampler=sampler, eta=eta)
        outs.append(to_images(x))
    return np.concatenate(outs)


def render_sources(chars, size: int, font: str) -> np.ndarray:
    return np.stack([gs.render_glyph(gs.GlyphSpec(ch, font, size)) for ch in chars])


def cmd_sample(args) -> int:
    out = Path(args.out)
    write_snapshot(out / "run_config.yaml", {"subcommand": "sample", **_args_dict(args)})
    ckpt, model = _load_model(args.ckpt)
    size = ckpt.config.image_size

    if args.manifest:
        from .harness import sample_manifest

        gen = sample_manifest(ckpt, model, gs.Manifest.load(args.manifest), out, args.steps, args.seed,
                              args.sampler, args.eta, ref=args.ref)
        print(f"wrote {len(gen)} images to {out}")
        return 0

    if not args.ref:
        raise UsageError("--ref is required unless --manifest is given")
    chars = expand_chars(args.chars) if args.chars else ([args.char] if args.char else None)
    if not chars:
        raise UsageError("one of --char, --chars or --manifest is required")
    ref = gs.load_image(args.ref)
    if ref.shape[:2] != (size, size):
        raise UsageError(f"reference is {ref.shape[1]}×{ref.shape[0]}, checkpoint expects {size}×{size}")
    lg = render_sources(chars, size, args.font)
    lr = np.repeat(ref[None], len(chars), axis=0)
    prompts = [gs.make_prompt(ch, args.style_id) for ch in chars]
    imgs = generate(model, ckpt, lg, lr, prompts, args.steps, args.seed, args.sampler, args.eta)
    for ch, img in zip(chars, imgs):
        gs.save_image(out / f"gen_{ord(ch):05X}.png", img)
    print(f"wrote {len(chars)} images to {out}")
    return 0


def cmd_eval(args) -> int:
    out = Path(args.out)
    write_snapshot(out.with_suffix(".run.yaml"), {"subcommand": "eval", **_args_dict(args)})
    cfg = EvalConfig(ssim_window=args.window)
    report = evaluate_pairs(gs.Manifest.load(args.gen), gs.Manifest.load(args.gt), cfg,
                            meta={"gen": str(args.gen), "gt": str(args.gt)})
    report.save(out)
    sys.stdout.write(report.to_text())
    return 0


CELL_PAD = 2
BORDER = 3
HIGHLIGHT = (255, 0, 0)


def compose_grid(header: list[np.ndarray], rows: list[list[np.ndarray]], highlight_col: int | None) -> np.ndarray:
    """Header row of source glyphs then one row per model; ``highlight_col``'s header cell gets a red frame."""
    n_cols = len(header)
    size = header[0].shape[0]
    cell = size + 2 * CELL_PAD
    grid = np.ones(((len(rows) + 1) * cell, n_cols * cell, 3), dtype=np.float32)
    for r, row in enumerate([header] + rows):
        for c, img in enumerate(row):
            y, x = r * cell + CELL_PAD, c * cell + CELL_PAD
            grid[y : y + size, x : x + size] = img
    if highlight_col is not None:
        x0, color = highlight_col * cell, np.asarray(HIGHLIGHT, np.float32) / 255.0
        grid[0:BORDER, x0 : x0 + cell] = color
        grid[cell - BORDER : cell, x0 : x0 + cell] = color
        grid[0:cell, x0 : x0 + BORDER] = color
        grid[0:cell, x0 + cell - BORDER : x0 + cell] = color
    return grid


def cmd_grid(args) -> int:
    out = Path(args.out)
    write_snapshot(out.with_suffix(".run.yaml"), {"subcommand": "grid", **_args_dict(args)})
    chars = expand_chars(args.chars)
    if not chars:
        raise UsageError("--chars is empty")
    ref_char = args.ref_char or chars[0]
    if ref_char not in chars:
        raise UsageError(f"--ref-char {ref_char!r} is not among --chars")
    ref = gs.load_image(args.ref)
    rows, size = [], None
    for path in args.ckpt:
        ckpt, model = _load_model(path)
        size = ckpt.config.image_size
        lg = render_sources(chars, size, args.font)
        lr = np.repeat(ref[None], len(chars), axis=0)
        prompts = [gs.make_prompt(ch, args.style_id) for ch in chars]
        rows.append(list(generate(model, ckpt, lg, lr, prompts, args.steps, args.seed, args.sampler)))
    header = list(render_sources(chars, size, args.font))
    col = chars.index(ref_char)
    header[col] = ref
    gs.save_image(out, compose_grid(header, rows, col))
    print(f"wrote {len(rows)}×{len(chars)} grid to {out}")
    return 0


# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="anyglyph", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth-data", help="render a synthetic styled-glyph dataset")
    s.add_argument("--charset", help="charset file or preset name")
    s.add_argument("--preset", choices=sorted(gs.PRESETS))
    s.add_argument("--styles", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--split", type=float, default=0.75)
    s.add_argument("--canvas", type=int, default=128)
    s.add_argument("--font", default=gs.DEFAULT_FONT)
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("train", help="train a model on a dataset manifest")
    s.add_argument("--data", required=True, help="manifest file or dataset directory")
    s.add_argument("--config")
    s.add_argument("--override", nargs="+", default=[], metavar="KEY=VALUE")
    s.add_argument("--out", required=True)
    s.add_argument("--seeds", help="comma-separated seeds; one run per seed")
    s.add_argument("--resume")
    s.set_defaults(func=cmd_train)

    def sampling_args(s):
        s.add_argument("--steps", type=int, default=50)
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--sampler", choices=["ddim", "ddpm"], default="ddim")
        s.add_argument("--font", default=gs.DEFAULT_FONT)
        s.add_argument("--style-id", default="ref")

    s = sub.add_parser("sample", help="one-shot generation from a reference image")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--ref")
    s.add_argument("--char")
    s.add_argument("--chars", help="characters or a range such as A..Z")
    s.add_argument("--manifest", help="generate every record of a manifest (writes a manifest for eval)")
    s.add_argument("--eta", type=float, default=0.0)
    s.add_argument("--out", required=True)
    sampling_args(s)
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("eval", help="L1/SSIM/PSNR/FID of generated vs ground-truth manifests")
    s.add_argument("--gen", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--out", required=True, help="report file")
    s.add_argument("--window", type=int, default=11)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("grid", help="comparison grid: rows = checkpoints, columns = characters")
    s.add_argument("--ckpt", nargs="+", required=True)
    s.add_argument("--chars", required=True)
    s.add_argument("--ref", required=True)
    s.add_argument("--ref-char")
    s.add_argument("--out", required=True)
    sampling_args(s)
    s.set_defaults(func=cmd_grid)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        with torch.set_grad_enabled(args.command == "train"):
            return args.func(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"anyglyph: error: {e}", file=sys.stderr)
        return 2
    except (AnyGlyphError, OSError) as e:
        print(f"anyglyph: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
