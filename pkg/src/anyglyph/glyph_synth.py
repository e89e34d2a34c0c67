"""Glyph rendering and procedural artistic-style synthesis.

A dataset sample pairs a styled target ``x0`` with the same character drawn in
the uniform source font (``lg``) and a styled reference of a *different*
character in the same style (``lr``).
"""

from __future__ import annotations

import json
import os
import zlib
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
from PIL import Image, ImageDraw, ImageFont
from scipy import ndimage

from .errors import CanvasTooSmall, EmptyCharset, IOFailure, UnrenderableCodepoint

FONT_DIR = Path(__file__).parent / "fonts"
BUNDLED_FONTS = {"bundled-sans": FONT_DIR / "AnyGlyphMiniSans-Regular.otf"}
DEFAULT_FONT = "bundled-sans"

MIN_CANVAS = 16
MIN_FOREGROUND = 0.01
MAX_FOREGROUND = 0.90
GLYPH_SCALE = 0.75

PRESETS = {
    "latin26": "ABCDEFGHIJKLMNOPQRSTUVWXYZ",
    "chinese-mini": (
        "的一是不了人我在有他这个们中来上大为和国地到以说时要就出会可也你对生能而子那得于着下自之"
        "年过发后作里用道行所然家种事成方多经么去法学如都同现当没动面起看定天分还进好小部其些主样理"
        "心她本前开但因只从想实"
    ),
    "korean-mini": (
        "가나다라마바사아자차카타파하이그는을의에한고서지도리기로게수어시대요것해주구보우일회정국인"
        "생각말만면학들전부상무여음장성"
    ),
}


def font_path(font_id: str) -> Path:
    """Resolve a font id to a file: bundled fonts first, then ``$ANYGLYPH_CACHE/fonts``."""
    if font_id in BUNDLED_FONTS:
        return BUNDLED_FONTS[font_id]
    cache = os.environ.get("ANYGLYPH_CACHE")
    if cache:
        for ext in (".otf", ".ttf"):
            p = Path(cache) / "fonts" / f"{font_id}{ext}"
            if p.exists():
                return p
    raise UnrenderableCodepoint(f"unknown font id {font_id!r}")


@lru_cache(maxsize=None)
def _font_cmap(font_id: str) -> frozenset:
    from fontTools.ttLib import TTFont

    with TTFont(str(font_path(font_id)), lazy=True) as f:
        return frozenset(f.getBestCmap().keys())


@lru_cache(maxsize=None)
def _truetype(font_id: str, size: int) -> ImageFont.FreeTypeFont:
    return ImageFont.truetype(str(font_path(font_id)), size)


def font_has_glyph(font_id: str, codepoint: int) -> bool:
    return codepoint in _font_cmap(font_id)


def load_charset(arg: str) -> list[int]:
    """A preset name, or a UTF-8 text file whose non-whitespace characters form the charset."""
    if arg in PRESETS:
        text = PRESETS[arg]
    else:
        try:
            text = Path(arg).read_text(encoding="utf-8")
        except OSError as e:
            raise IOFailure(f"cannot read charset {arg!r}: {e}") from e
    out: list[int] = []
    for ch in text:
        if not ch.isspace() and ord(ch) not in out:
            out.append(ord(ch))
    if not out:
        raise EmptyCharset(f"charset {arg!r} has no characters")
    return out


# ---------------------------------------------------------------------------
# rendering


@dataclass(frozen=True)
class GlyphSpec:
    codepoint: int
    font_id: str = DEFAULT_FONT
    canvas: int = 128

    def __post_init__(self):
        if isinstance(self.codepoint, str):
            if len(self.codepoint) != 1:
                raise UnrenderableCodepoint(f"expected a single character, got {self.codepoint!r}")
            object.__setattr__(self, "codepoint", ord(self.codepoint))

    @property
    def char(self) -> str:
        return chr(self.codepoint)


def render_glyph(spec: GlyphSpec) -> np.ndarray:
    """Black glyph centred on a white canvas, float32 H×W×3 in [0, 1]."""
    if spec.canvas < MIN_CANVAS:
        raise CanvasTooSmall(f"canvas {spec.canvas} < {MIN_CANVAS}")
    if not font_has_glyph(spec.font_id, spec.codepoint):
        raise UnrenderableCodepoint(f"U+{spec.codepoint:04X} not in font {spec.font_id!r}")

    n = spec.canvas
    font = _truetype(spec.font_id, max(1, round(n * GLYPH_SCALE)))
    img = Image.new("L", (n, n), 255)
    draw = ImageDraw.Draw(img)
    x0, y0, x1, y1 = draw.textbbox((0, 0), spec.char, font=font)
    origin = (round((n - (x0 + x1)) / 2), round((n - (y0 + y1)) / 2))
    draw.text(origin, spec.char, font=font, fill=0)

    gray = np.asarray(img, dtype=np.float32) / 255.0
    frac = float((gray < 0.5).mean())
    if frac < MIN_FOREGROUND or frac > MAX_FOREGROUND:
        raise UnrenderableCodepoint(
            f"U+{spec.codepoint:04X} renders with foreground fraction {frac:.4f}"
        )
    return np.repeat(gray[..., None], 3, axis=-1)


def foreground_mask(glyph: np.ndarray) -> np.ndarray:
    return glyph.mean(axis=-1) < 0.5


# ---------------------------------------------------------------------------
# styles

RGB = tuple


def _check_rgb(c) -> RGB:
    c = tuple(int(v) for v in c)
    if len(c) != 3 or any(v < 0 or v > 255 for v in c):
        raise ValueError(f"not an 8-bit RGB triple: {c}")
    return c


@dataclass(frozen=True)
class Fill:
    kind: str = "solid"  # solid | gradient
    color: RGB = (0, 0, 0)
    color2: RGB = (0, 0, 0)
    angle: float = 0.0  # degrees, gradient direction

    def __post_init__(self):
        object.__setattr__(self, "color", _check_rgb(self.color))
        object.__setattr__(self, "color2", _check_rgb(self.color2))


@dataclass(frozen=True)
class Outline:
    color: RGB = (0, 0, 0)
    width: int = 0

    def __post_init__(self):
        object.__setattr__(self, "color", _check_rgb(self.color))


@dataclass(frozen=True)
class Texture:
    kind: str = "none"  # none | noise | stripes
    scale: int = 8
    seed: int = 0
    strength: float = 0.0


@dataclass(frozen=True)
class StyleParams:
    style_id: str
    fill: Fill = field(default_factory=Fill)
    outline: Outline = field(default_factory=Outline)
    texture: Texture = field(default_factory=Texture)
    background: RGB = (255, 255, 255)

    def __post_init__(self):
        object.__setattr__(self, "background", _check_rgb(self.background))

    @classmethod
    def identity(cls, style_id: str = "identity") -> "StyleParams":
        return cls(style_id)

    @classmethod
    def from_seed(cls, style_id: str, global_seed: int, canvas: int = 128) -> "StyleParams":
        """Draw a style deterministically from ``(style_id, global_seed)``.

        ``canvas`` only scales outline widths and texture periods.
        """
        rng = np.random.default_rng([global_seed, zlib.crc32(style_id.encode("utf-8"))])
        unit = max(1, round(canvas / 64))

        light_bg = rng.random() < 0.7
        bg = _random_color(rng, lo=200, hi=256) if light_bg else _random_color(rng, lo=0, hi=60)
        c1 = _contrasting_color(rng, bg)
        if rng.random() < 0.5:
            fill = Fill("gradient", c1, _contrasting_color(rng, bg), float(rng.uniform(0, 360)))
        else:
            fill = Fill("solid", c1, c1, 0.0)

        width = int(rng.choice([0, 0, 1, 2])) * unit
        outline = Outline(_contrasting_color(rng, c1) if width else (0, 0, 0), width)

        kind = str(rng.choice(["none", "noise", "stripes"]))
        texture = Texture(
            kind,
            scale=int(rng.integers(2, 6)) * unit,
            seed=int(rng.integers(0, 2**31 - 1)),
            strength=float(rng.uniform(0.15, 0.4)) if kind != "none" else 0.0,
        )
        return cls(style_id, fill, outline, texture, bg)

    def to_dict(self) -> dict:
        return asdict(self)


def _luma(c) -> float:
    return (0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]) / 255.0


def _random_color(rng, lo=0, hi=256) -> RGB:
    return tuple(int(v) for v in rng.integers(lo, hi, size=3))


def _contrasting_color(rng, against, min_diff=0.35) -> RGB:
    for _ in range(64):
        c = _random_color(rng)
        if abs(_luma(c) - _luma(against)) >= min_diff:
            return c
    return (0, 0, 0) if _luma(against) > 0.5 else (255, 255, 255)


def _disk(radius: int) -> np.ndarray:
    y, x = np.mgrid[-radius : radius + 1, -radius : radius + 1]
    return x * x + y * y <= radius * radius


def _texture_field(tex: Texture, shape, seed: int) -> np.ndarray:
    h, w = shape
    rng = np.random.default_rng([tex.seed, seed])
    if tex.kind == "noise":
        gh, gw = h // tex.scale + 2, w // tex.scale + 2
        grid = rng.random((gh, gw))
        ys = np.arange(h) / tex.scale
        xs = np.arange(w) / tex.scale
        yy, xx = np.meshgrid(ys, xs, indexing="ij")
        return ndimage.map_coordinates(grid, [yy, xx], order=1, mode="nearest")
    if tex.kind == "stripes":
        theta = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        yy, xx = np.mgrid[0:h, 0:w]
        u = xx * np.cos(theta) + yy * np.sin(theta)
        return 0.5 + 0.5 * np.sin(2 * np.pi * u / (2 * tex.scale) + phase)
    return np.full((h, w), 0.5)


def _fill_field(fill: Fill, shape) -> np.ndarray:
    h, w = shape
    c1 = np.asarray(fill.color, dtype=np.float64) / 255.0
    if fill.kind != "gradient":
        return np.broadcast_to(c1, (h, w, 3)).copy()
    c2 = np.asarray(fill.color2, dtype=np.float64) / 255.0
    a = np.deg2rad(fill.angle)
    yy, xx = np.mgrid[0:h, 0:w]
    u = xx / max(w - 1, 1) * np.cos(a) + yy / max(h - 1, 1) * np.sin(a)
    u = (u - u.min()) / max(u.max() - u.min(), 1e-12)
    return c1 * (1 - u[..., None]) + c2 * u[..., None]


def apply_style(glyph: np.ndarray, style: StyleParams, seed: int = 0) -> np.ndarray:
    """Recolour a rendered black-on-white glyph with ``style``; returns float32 H×W×3."""
    glyph = np.asarray(glyph, dtype=np.float64)
    if glyph.ndim != 3 or glyph.shape[-1] != 3:
        raise ValueError(f"expected H×W×3 glyph, got {glyph.shape}")
    h, w, _ = glyph.shape
    alpha = np.clip(1.0 - glyph.mean(axis=-1), 0.0, 1.0)[..., None]

    out = np.broadcast_to(np.asarray(style.background, dtype=np.float64) / 255.0, (h, w, 3)).copy()
    if style.outline.width > 0:
        ring = ndimage.grey_dilation(alpha[..., 0], footprint=_disk(style.outline.width))[..., None]
        oc = np.asarray(style.outline.color, dtype=np.float64) / 255.0
        out = out * (1 - ring) + oc * ring

    fill = _fill_field(style.fill, (h, w))
    if style.texture.kind != "none" and style.texture.strength > 0:
        n = _texture_field(style.texture, (h, w), seed)
        fill = fill + style.texture.strength * (n[..., None] - 0.5) * 2.0
    out = out * (1 - alpha) + np.clip(fill, 0.0, 1.0) * alpha
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def make_prompt(char, style_id: str) -> str:
    if isinstance(char, int):
        char = chr(char)
    return f'render glyph "{char}" in style {style_id}'


# ---------------------------------------------------------------------------
# image io


def save_image(path, img: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(arr, mode="RGB").save(path, format="PNG")
    except OSError as e:
        raise IOFailure(f"cannot write {path}: {e}") from e


def load_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    except OSError as e:
        raise IOFailure(f"cannot read {path}: {e}") from e
    return arr / 255.0


# ---------------------------------------------------------------------------
# dataset


@dataclass
class ManifestRecord:
    id: str
    codepoint: int
    style_id: str
    path_x0: str
    path_lg: str
    path_lr: str
    prompt: str

    @property
    def char(self) -> str:
        return chr(self.codepoint)

    def to_json(self) -> str:
        d = asdict(self)
        d["codepoint"] = f"{self.codepoint:04X}"
        return json.dumps(d, ensure_ascii=False)

    @classmethod
    def from_json(cls, line: str) -> "ManifestRecord":
        d = json.loads(line)
        d["codepoint"] = int(d["codepoint"], 16)
        return cls(**d)


@dataclass
class Manifest:
    """Line-delimited sample list; paths are relative to ``root``."""

    root: Path
    records: list[ManifestRecord]

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[ManifestRecord]:
        return iter(self.records)

    def resolve(self, rel: str) -> Path:
        return Path(self.root) / rel

    def by_id(self) -> dict[str, ManifestRecord]:
        return {r.id: r for r in self.records}

    def save(self, path) -> Path:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "w", encoding="utf-8", newline="\n") as fh:
                for r in self.records:
                    fh.write(r.to_json() + "\n")
        except OSError as e:
            raise IOFailure(f"cannot write manifest {path}: {e}") from e
        return path

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.jsonl"
        try:
            lines = path.read_text(encoding="utf-8").splitlines()
        except OSError as e:
            raise IOFailure(f"cannot read manifest {path}: {e}") from e
        return cls(path.parent, [ManifestRecord.from_json(l) for l in lines if l.strip()])

    def subset(self, ids: Iterable[str]) -> "Manifest":
        keep = set(ids)
        return Manifest(self.root, [r for r in self.records if r.id in keep])


def sample_id(style_id: str, codepoint: int) -> str:
    return f"{style_id}_{codepoint:05X}"


def style_ids(n_styles: int) -> list[str]:
    return [f"s{i:04d}" for i in range(n_styles)]


def split_styles(styles: Sequence[str], split: float) -> tuple[list[str], list[str]]:
    n_train = min(len(styles), max(0, int(round(split * len(styles)))))
    return list(styles[:n_train]), list(styles[n_train:])


def pick_reference(codepoints: Sequence[int], target: int, style_id: str, seed: int) -> int:
    others = [c for c in codepoints if c != target]
    rng = np.random.default_rng([seed, zlib.crc32(style_id.encode("utf-8")), target])
    return others[int(rng.integers(len(others)))]


def build_dataset(
    charset,
    n_styles: int,
    seed: int,
    split: float = 0.75,
    out_dir=".",
    canvas: int = 128,
    font_id: str = DEFAULT_FONT,
) -> Manifest:
    """Synthesize every (style, char) pair and write images plus manifests to ``out_dir``.

    Writes ``manifest.jsonl`` (all samples), ``train.jsonl``/``test.jsonl`` (style-disjoint
    subsets) and ``dataset.json`` with the generating arguments.
    """
    cps: list[int] = []
    for c in charset:
        cp = ord(c) if isinstance(c, str) else int(c)
        if cp not in cps:
            cps.append(cp)
    if not cps:
        raise EmptyCharset("charset is empty")
    if len(cps) < 2:
        raise EmptyCharset("need at least two characters to draw references")
    if n_styles < 1:
        raise ValueError("n_styles must be >= 1")

    out = Path(out_dir)
    glyphs = {cp: render_glyph(GlyphSpec(cp, font_id, canvas)) for cp in cps}
    for cp, g in glyphs.items():
        save_image(out / "glyphs" / f"{cp:05X}.png", g)

    styles = style_ids(n_styles)
    train, test = split_styles(styles, split)
    records = []
    for sid in styles:
        part = "train" if sid in train else "test"
        style = StyleParams.from_seed(sid, seed, canvas)
        for cp in cps:
            save_image(out / part / sid / f"{cp:05X}.png", apply_style(glyphs[cp], style, seed))
        for cp in cps:
            ref = pick_reference(cps, cp, sid, seed)
            records.append(
                ManifestRecord(
                    id=sample_id(sid, cp),
                    codepoint=cp,
                    style_id=sid,
                    path_x0=f"{part}/{sid}/{cp:05X}.png",
                    path_lg=f"glyphs/{cp:05X}.png",
                    path_lr=f"{part}/{sid}/{ref:05X}.png",
                    prompt=make_prompt(cp, sid),
                )
            )

    manifest = Manifest(out, records)
    manifest.save(out / "manifest.jsonl")
    Manifest(out, [r for r in records if r.style_id in train]).save(out / "train.jsonl")
    Manifest(out, [r for r in records if r.style_id in test]).save(out / "test.jsonl")
    meta = {
        "charset": "".join(chr(c) for c in cps),
        "n_styles": n_styles,
        "seed": seed,
        "split": split,
        "canvas": canvas,
        "font_id": font_id,
        "train_styles": train,
        "test_styles": test,
    }
    try:
        (out / "dataset.json").write_text(
            json.dumps(meta, ensure_ascii=False, indent=2) + "\n", encoding="utf-8"
        )
    except OSError as e:
        raise IOFailure(str(e)) from e
    return manifest


def read_dataset_meta(root) -> dict:
    return json.loads((Path(root) / "dataset.json").read_text(encoding="utf-8"))


def _char_of_path(rel: str) -> int:
    return int(Path(rel).stem, 16)


def validate_manifest(manifest: Manifest, deep: bool = False) -> list[str]:
    """Return a list of violations (empty when valid).

    Checks reference leakage and style consistency for every record. With
    ``deep=True`` the style is re-derived from ``dataset.json`` and both ``x0``
    and ``lr`` are re-synthesized and compared pixel-exactly with the files.
    """
    problems = []
    meta = read_dataset_meta(manifest.root) if deep else None
    for r in manifest:
        ref_cp = _char_of_path(r.path_lr)
        if ref_cp == r.codepoint:
            problems.append(f"{r.id}: reference uses the target character")
        if Path(r.path_lr).parent != Path(r.path_x0).parent or Path(r.path_x0).parent.name != r.style_id:
            problems.append(f"{r.id}: reference not drawn from style {r.style_id}")
        if _char_of_path(r.path_lg) != r.codepoint or _char_of_path(r.path_x0) != r.codepoint:
            problems.append(f"{r.id}: glyph/target character mismatch")
        if r.prompt != make_prompt(r.codepoint, r.style_id):
            problems.append(f"{r.id}: prompt does not match template")
        if deep:
            style = StyleParams.from_seed(r.style_id, meta["seed"], meta["canvas"])
            for cp, rel in ((r.codepoint, r.path_x0), (ref_cp, r.path_lr)):
                g = render_glyph(GlyphSpec(cp, meta["font_id"], meta["canvas"]))
                want = np.round(apply_style(g, style, meta["seed"]).astype(np.float64) * 255)
                got = np.round(load_image(manifest.resolve(rel)).astype(np.float64) * 255)
                if not np.array_equal(want, got):
                    problems.append(f"{r.id}: {rel} differs from style {r.style_id} re-synthesis")
    return problems
