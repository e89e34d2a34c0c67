"""Experiment recipes: the seven-row ablation sweep and the overfit probe.

A recipe is a YAML document (see ``recipes/``) holding the dataset preset, the
training config overrides, the evaluation config and the thresholds checked by
the probe. Everything downstream is derived from the recipe plus a seed.
"""

from __future__ import annotations

import dataclasses
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import yaml

from . import glyph_synth as gs
from .config import TrainConfig
from .errors import AnyGlyphError
from .metrics import EvalConfig, EvalReport, evaluate_pairs

log = logging.getLogger(__name__)

RECIPE_DIR = Path(__file__).resolve().parents[2] / "recipes"


@dataclass
class ExperimentRecipe:
    name: str
    preset: str = "korean-mini"
    chars: str = ""  # explicit characters; overrides preset when non-empty
    n_styles: int = 2
    split: float = 0.5
    canvas: int = 32
    data_seed: int = 0
    train: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)
    sample_steps: int = 50
    sampler: str = "ddim"
    expect: dict = field(default_factory=dict)

    def charset(self) -> list[int]:
        return [ord(c) for c in self.chars] if self.chars else gs.load_charset(self.preset)

    def train_config(self, seed: int = 0, **overrides) -> TrainConfig:
        cfg = TrainConfig.from_dict({"image_size": self.canvas, **self.train})
        return cfg.replace(seed=seed, **overrides)

    def eval_config(self) -> EvalConfig:
        return EvalConfig(**self.eval)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, allow_unicode=True)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_yaml(), encoding="utf-8")
        return path

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentRecipe":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise KeyError(f"unknown recipe keys {unknown}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentRecipe":
        path = Path(path)
        if not path.exists() and not path.suffix:
            path = RECIPE_DIR / f"{path}.yaml"
        return cls.from_dict(yaml.safe_load(path.read_text(encoding="utf-8")))


def prepare_dataset(recipe: ExperimentRecipe, root) -> gs.Manifest:
    """Build the recipe's dataset under ``root`` unless an identical one is already there."""
    root = Path(root)
    if (root / "manifest.jsonl").exists():
        meta = gs.read_dataset_meta(root)
        want = {"charset": "".join(map(chr, recipe.charset())), "n_styles": recipe.n_styles,
                "seed": recipe.data_seed, "split": recipe.split, "canvas": recipe.canvas}
        if all(meta.get(k) == v for k, v in want.items()):
            return gs.Manifest.load(root)
    return gs.build_dataset(recipe.charset(), recipe.n_styles, recipe.data_seed, recipe.split, root, recipe.canvas)


def split_manifest(root, split: str) -> gs.Manifest:
    return gs.Manifest.load(Path(root) / f"{split}.jsonl")


def sample_manifest(ckpt, model, manifest: gs.Manifest, out_dir, steps: int = 50, seed: int = 0,
                    sampler: str = "ddim", eta: float = 0.0, ref=None, chunk: int = 32) -> gs.Manifest:
    """Generate every record of ``manifest`` and write PNGs plus a manifest aligned by id."""
    from .diffusion import sample
    from .model import to_batch, to_images

    out_dir = Path(out_dir)
    recs = list(manifest)
    lg = np.stack([gs.load_image(manifest.resolve(r.path_lg)) for r in recs])
    if ref is not None:
        lr = np.repeat(gs.load_image(ref)[None], len(recs), axis=0)
    else:
        lr = np.stack([gs.load_image(manifest.resolve(r.path_lr)) for r in recs])
    gen = []
    with torch.no_grad():
        for i in range(0, len(recs), chunk):
            part = recs[i : i + chunk]
            x = sample(model, to_batch(lg[i : i + chunk]), to_batch(lr[i : i + chunk]), [r.prompt for r in part],
                       ckpt.schedule, num_steps=steps, seed=seed + i, sampler=sampler, eta=eta)
            for r, img in zip(part, to_images(x)):
                gs.save_image(out_dir / f"{r.id}.png", img)
                lr_path = Path(ref) if ref is not None else manifest.resolve(r.path_lr)
                gen.append(gs.ManifestRecord(
                    r.id, r.codepoint, r.style_id, f"{r.id}.png",
                    os.path.relpath(manifest.resolve(r.path_lg), out_dir),
                    os.path.relpath(lr_path, out_dir), r.prompt,
                ))
    out = gs.Manifest(out_dir, gen)
    out.save(out_dir / "manifest.jsonl")
    return out


# ---------------------------------------------------------------------------
# ablation sweep


@dataclass(frozen=True)
class AblationRow:
    name: str
    deltas: dict
    reference: bool = False

    @property
    def lam(self):
        return self.deltas.get("lambda") if self.deltas.get("use_lfl", True) else None


_ALL = {"use_ci": True, "use_ct": True, "use_lfl": True}
ABLATION_ROWS = (
    AblationRow("baseline", {"use_ci": False, "use_ct": False, "use_lfl": False}),
    AblationRow("+c_i", {"use_ci": True, "use_ct": False, "use_lfl": False}),
    AblationRow("+c_t", {"use_ci": False, "use_ct": True, "use_lfl": False}),
    AblationRow("+c_i+c_t", {"use_ci": True, "use_ct": True, "use_lfl": False}),
    AblationRow("+all λ=0.5", {**_ALL, "lambda": 0.5}),
    AblationRow("+all λ=1.0", {**_ALL, "lambda": 1.0}, reference=True),
    AblationRow("+all λ=1.5", {**_ALL, "lambda": 1.5}),
)


def row_slug(row: AblationRow) -> str:
    return row.name.replace("+", "plus_").replace("λ=", "lambda_").replace(" ", "_")


def config_delta(a: TrainConfig, b: TrainConfig) -> dict:
    """Keys whose values differ between two configs (b's values)."""
    da, db = a.to_dict(), b.to_dict()
    return {k: db[k] for k in db if da[k] != db[k]}


def run_ablation_sweep(recipe: ExperimentRecipe, seeds=(0,), out_dir="runs/ablation", steps: int | None = None,
                       sample_steps: int | None = None, rows=ABLATION_ROWS) -> list[EvalReport]:
    """Train, sample and evaluate every row for every seed; writes one report per run and ``summary.txt``.

    Reports come back ordered row-major (all seeds of row 0, then row 1, ...).
    """
    from .trainer import train

    out_dir = Path(out_dir)
    recipe.save(out_dir / "recipe.yaml")
    data_root = out_dir / "data"
    prepare_dataset(recipe, data_root)
    train_m, test_m = split_manifest(data_root, "train"), split_manifest(data_root, "test")
    if len(test_m) == 0:
        test_m = train_m
    n_steps = sample_steps or recipe.sample_steps

    reports = []
    for row in rows:
        for seed in seeds:
            run_dir = out_dir / row_slug(row) / f"seed_{seed}"
            extra = {"steps": steps} if steps else {}
            cfg = recipe.train_config(seed, **extra).replace(**row.deltas)
            cfg.save(run_dir / "config.yaml")
            t0 = time.time()
            ckpt = train(cfg, train_m, run_dir)
            model = ckpt.build_model()
            gen = sample_manifest(ckpt, model, test_m, run_dir / "samples", n_steps, seed, recipe.sampler)
            meta = {
                "row": row.name,
                "reference_row": row.reference,
                "seed": seed,
                "steps": ckpt.step,
                "sample_steps": n_steps,
                "lambda": "-" if row.lam is None else row.lam,
                "deltas": ",".join(f"{k}={v}" for k, v in sorted(row.deltas.items())),
                "seconds": round(time.time() - t0, 1),
            }
            report = evaluate_pairs(gen, test_m, recipe.eval_config(), meta)
            report.save(run_dir / "report.txt")
            log.info("%s seed %d: %s", row.name, seed, report.metrics)
            reports.append(report)
    write_summary(out_dir)
    return reports


def summarize(reports: list[EvalReport]) -> str:
    """Text table in the ablation column order; multiple seeds are shown as mean±std."""
    by_row: dict[str, list[EvalReport]] = {}
    for r in reports:
        by_row.setdefault(r.meta["row"], []).append(r)
    order = [row.name for row in ABLATION_ROWS if row.name in by_row] + sorted(set(by_row) - {row.name for row in ABLATION_ROWS})
    head = f"{'row':<14}{'c_i':<5}{'c_t':<5}{'L_fl':<6}{'λ':<5}{'seeds':<7}" + "".join(f"{m:<18}" for m in EvalReport.METRIC_ORDER) + "LPIPS"
    lines = [head, "-" * len(head)]
    for name in order:
        rs = sorted(by_row[name], key=lambda r: r.meta.get("seed", 0))
        deltas = dict(kv.split("=", 1) for kv in str(rs[0].meta.get("deltas", "")).split(",") if "=" in kv)
        flag = lambda k: "✓" if deltas.get(k, "True") == "True" else "-"
        cells = []
        for m in EvalReport.METRIC_ORDER:
            vals = np.array([r.metrics[m] for r in rs])
            cells.append(f"{vals.mean():.4f}" + (f"±{vals.std(ddof=1):.4f}" if len(vals) > 1 else ""))
        mark = " *" if rs[0].meta.get("reference_row") else ""
        lines.append(f"{name + mark:<14}{flag('use_ci'):<5}{flag('use_ct'):<5}{flag('use_lfl'):<6}{str(rs[0].meta.get('lambda', '-')):<5}{len(rs):<7}"
                     + "".join(f"{c:<18}" for c in cells) + "excluded")
    lines.append("")
    lines.append("* reference row (λ = 1.0)")
    return "\n".join(lines) + "\n"


def load_reports(out_dir) -> list[EvalReport]:
    return [EvalReport.load(p) for p in sorted(Path(out_dir).glob("*/seed_*/report.txt"))]


def write_summary(out_dir) -> Path:
    """Regenerates ``summary.txt`` purely from the stored reports."""
    path = Path(out_dir) / "summary.txt"
    path.write_text(summarize(load_reports(out_dir)), encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# overfit probe


@dataclass
class ProbeReport:
    passed: bool
    seed: int
    checks: dict = field(default_factory=dict)
    values: dict = field(default_factory=dict)
    error: str = ""
    trace_tail: list = field(default_factory=list)

    def to_text(self) -> str:
        lines = [f"overfit probe seed={self.seed}: {'PASS' if self.passed else 'FAIL'}"]
        lines += [f"  {k}: {'pass' if v else 'FAIL'}" for k, v in self.checks.items()]
        lines += [f"  {k} = {v}" for k, v in self.values.items()]
        if self.error:
            lines.append(f"  error: {self.error}")
        if not self.passed and self.trace_tail:
            lines.append("  last loss trace rows:")
            lines += [f"    {row}" for row in self.trace_tail]
        return "\n".join(lines) + "\n"

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text(), encoding="utf-8")
        return path


def loss_ratio(trace, head: int = 10, tail: int = 100) -> tuple[float, float, float]:
    """(initial, final, final/initial) with initial/final = mean L_total over the first/last steps."""
    losses = [row["L_total"] for row in trace]
    init = float(np.mean(losses[:head]))
    final = float(np.mean(losses[-tail:]))
    return init, final, final / init


def _corrupt(path: Path) -> None:
    raw = bytearray(path.read_bytes())
    raw[len(raw) // 2] ^= 0xFF
    path.write_bytes(bytes(raw))


def run_overfit_probe(seed: int = 0, out_dir="runs/overfit", recipe: ExperimentRecipe | str = "overfit_probe",
                      corrupt_checkpoint: bool = False, check_sampling: bool = True, **overrides) -> ProbeReport:
    """Overfit a 1-style × 10-glyph set, reload the final checkpoint from disk and sample the training pairs.

    ``overrides`` are applied to the train config (e.g. ``lambda_=0``). Set
    ``check_sampling=False`` to run only the loss-decrease check.
    """
    from .diffusion import sample
    from .trainer import load_checkpoint, load_data, train

    if not isinstance(recipe, ExperimentRecipe):
        recipe = ExperimentRecipe.load(recipe)
    out_dir = Path(out_dir)
    recipe.save(out_dir / "recipe.yaml")
    expect = {"max_loss_ratio": 0.1, "max_sample_l1": 0.05, **recipe.expect}
    report = ProbeReport(passed=False, seed=seed)
    try:
        manifest = prepare_dataset(recipe, out_dir / "data")
        cfg = recipe.train_config(seed, **overrides)
        cfg.save(out_dir / "config.yaml")
        t0 = time.time()
        trained = train(cfg, manifest, out_dir)
        report.values["train_seconds"] = round(time.time() - t0, 1)
        report.trace_tail = trained.trace[-5:]
        init, final, ratio = loss_ratio(trained.trace)
        report.values.update(initial_loss=init, final_loss=final, loss_ratio=ratio)
        report.checks["loss_ratio < %g" % expect["max_loss_ratio"]] = ratio < expect["max_loss_ratio"]

        path = out_dir / "final.agc"
        if corrupt_checkpoint:
            _corrupt(path)
        ckpt = load_checkpoint(path)

        if check_sampling:
            model = ckpt.build_model()
            data = load_data(manifest)
            with torch.no_grad():
                x = sample(model, data.lg, data.lr, data.prompts, ckpt.schedule,
                           num_steps=recipe.sample_steps, seed=seed, sampler=recipe.sampler)
            per_pair = (x - data.x0).abs().mean(dim=(1, 2, 3)).double()
            report.values["sample_l1_mean"] = float(per_pair.mean())
            report.values["sample_l1_max"] = float(per_pair.max())
            report.checks["sample L1 < %g" % expect["max_sample_l1"]] = float(per_pair.mean()) < expect["max_sample_l1"]
    except AnyGlyphError as e:
        report.error = f"{type(e).__name__}: {e}"
        report.values["error_type"] = type(e).__name__
    report.passed = not report.error and bool(report.checks) and all(report.checks.values())
    report.save(out_dir / "probe_report.txt")
    if not report.passed:
        log.error("overfit probe failed\n%s", report.to_text())
    return report
