"""Pixel metrics (L1, PSNR, SSIM), Fréchet distance between feature sets, and
manifest-level evaluation reports. Images are H×W×3 (or H×W) arrays in [0, 1];
everything is computed in float64."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .errors import ImageTooSmall, ManifestMismatch, NonFiniteFeatures, ShapeMismatch, TooFewSamples
from .glyph_synth import Manifest, load_image

PSNR_CAP = 100.0


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    return a, b


def l1(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.abs(a - b).mean())


def psnr(a, b, peak: float = 1.0) -> float:
    a, b = _pair(a, b)
    mse = float(((a - b) ** 2).mean())
    if mse < 1e-10:
        return PSNR_CAP
    return float(10.0 * np.log10(peak**2 / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = len(g)
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=0) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=1) @ g


def ssim_map(a: np.ndarray, b: np.ndarray, window: int = 11, k1: float = 0.01, k2: float = 0.03, peak: float = 1.0, sigma: float = 1.5) -> np.ndarray:
    """Local SSIM over every fully-contained window of a single-channel pair."""
    g = gaussian_window(window, sigma)
    c1, c2 = (k1 * peak) ** 2, (k2 * peak) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a**2
    var_b = _filter_valid(b * b, g) - mu_b**2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, window: int = 11, k1: float = 0.01, k2: float = 0.03, peak: float = 1.0) -> float:
    a, b = _pair(a, b)
    if a.shape[0] < window or a.shape[1] < window:
        raise ImageTooSmall(f"image {a.shape[:2]} smaller than window {window}")
    if a.ndim == 2:
        return float(ssim_map(a, b, window, k1, k2, peak).mean())
    return float(np.mean([ssim_map(a[..., ch], b[..., ch], window, k1, k2, peak).mean() for ch in range(a.shape[-1])]))


# ---------------------------------------------------------------------------
# Fréchet distance


class GaussianStats:
    """Streaming first/second moments; shards can be merged with ``+``."""

    def __init__(self, dim: int):
        self.n = 0
        self.s1 = np.zeros(dim)
        self.s2 = np.zeros((dim, dim))

    def update(self, feats) -> "GaussianStats":
        f = np.asarray(feats, dtype=np.float64)
        if f.ndim != 2 or f.shape[1] != len(self.s1):
            raise ShapeMismatch(f"expected n×{len(self.s1)} features, got {f.shape}")
        if not np.isfinite(f).all():
            raise NonFiniteFeatures("features contain NaN or inf")
        self.n += f.shape[0]
        self.s1 += f.sum(axis=0)
        self.s2 += f.T @ f
        return self

    def __add__(self, other: "GaussianStats") -> "GaussianStats":
        out = GaussianStats(len(self.s1))
        out.n, out.s1, out.s2 = self.n + other.n, self.s1 + other.s1, self.s2 + other.s2
        return out

    @property
    def mean(self) -> np.ndarray:
        return self.s1 / self.n

    @property
    def cov(self) -> np.ndarray:
        mu = self.mean
        c = (self.s2 - self.n * np.outer(mu, mu)) / (self.n - 1)
        return (c + c.T) / 2


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(mu_a, cov_a, mu_b, cov_b) -> float:
    """|μa−μb|² + tr(Σa + Σb − 2(ΣaΣb)^½), with tr((ΣaΣb)^½) = tr((√Σa Σb √Σa)^½)."""
    mu_a, mu_b = np.asarray(mu_a, np.float64), np.asarray(mu_b, np.float64)
    cov_a, cov_b = np.atleast_2d(cov_a).astype(np.float64), np.atleast_2d(cov_b).astype(np.float64)
    sa = _psd_sqrt(cov_a)
    inner = sa @ cov_b @ sa
    w = np.linalg.eigvalsh((inner + inner.T) / 2)
    tr_sqrt = float(np.sqrt(np.clip(w, 0.0, None)).sum())
    d = float(((mu_a - mu_b) ** 2).sum() + np.trace(cov_a) + np.trace(cov_b) - 2 * tr_sqrt)
    return max(d, 0.0)


def fid(features_a, features_b, min_samples: int | None = None) -> float:
    fa = np.asarray(features_a, dtype=np.float64)
    fb = np.asarray(features_b, dtype=np.float64)
    if fa.ndim != 2 or fb.ndim != 2 or fa.shape[1] != fb.shape[1]:
        raise ShapeMismatch(f"feature sets must be n×D with equal D: {fa.shape} vs {fb.shape}")
    need = fa.shape[1] + 1 if min_samples is None else min_samples
    if min(len(fa), len(fb)) < max(need, 2):
        raise TooFewSamples(f"need at least {max(need, 2)} vectors per set, got {len(fa)} and {len(fb)}")
    sa = GaussianStats(fa.shape[1]).update(fa)
    sb = GaussianStats(fb.shape[1]).update(fb)
    return frechet_distance(sa.mean, sa.cov, sb.mean, sb.cov)


# ---------------------------------------------------------------------------
# evaluation over manifests


def phi_features(images: np.ndarray, batch: int = 64) -> np.ndarray:
    from .losses import default_extractor

    phi = default_extractor(torch.float64)
    out = []
    with torch.no_grad():
        for i in range(0, len(images), batch):
            x = torch.from_numpy(np.asarray(images[i : i + batch], dtype=np.float64)).permute(0, 3, 1, 2)
            out.append(phi.pooled(x).numpy())
    return np.concatenate(out)


def extractor_id() -> str:
    from .losses import default_extractor

    return default_extractor().extractor_id + "-pool3"


EXTRACTORS: dict[str, tuple[Callable[[], str], Callable]] = {"phi": (extractor_id, phi_features)}


@dataclass
class EvalConfig:
    ssim_window: int = 11
    ssim_k1: float = 0.01
    ssim_k2: float = 0.03
    peak: float = 1.0
    extractor: str = "phi"


@dataclass
class EvalReport:
    metrics: dict
    n: int
    config: dict
    extractor_id: str
    ids_sha256: str = ""
    meta: dict = field(default_factory=dict)

    METRIC_ORDER = ("L1", "SSIM", "PSNR", "FID")

    def to_text(self) -> str:
        lines = ["# anyglyph evaluation report", f"samples: {self.n}", f"extractor: {self.extractor_id}", f"ids_sha256: {self.ids_sha256}"]
        lines += [f"config.{k}: {v}" for k, v in sorted(self.config.items())]
        lines += [f"meta.{k}: {v}" for k, v in sorted(self.meta.items())]
        lines += ["", f"{'metric':<8}value"]
        lines += [f"{k:<8}{self.metrics[k]:.6f}" for k in self.METRIC_ORDER if k in self.metrics]
        lines.append(f"{'LPIPS':<8}excluded")
        return "\n".join(lines) + "\n"

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text(), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> "EvalReport":
        head, _, table = Path(path).read_text(encoding="utf-8").partition("\n\n")
        kv = {}
        for line in head.splitlines():
            if line.startswith("#") or ": " not in line:
                continue
            k, v = line.split(": ", 1)
            kv[k] = v
        metrics = {}
        for line in table.splitlines()[1:]:
            name, val = line.split()
            if val != "excluded":
                metrics[name] = float(val)
        config = {k[7:]: _parse_scalar(v) for k, v in kv.items() if k.startswith("config.")}
        meta = {k[5:]: _parse_scalar(v) for k, v in kv.items() if k.startswith("meta.")}
        return cls(metrics, int(kv["samples"]), config, kv["extractor"], kv.get("ids_sha256", ""), meta)


def _parse_scalar(v: str):
    for cast in (int, float):
        try:
            return cast(v)
        except ValueError:
            pass
    return {"True": True, "False": False}.get(v, v)


def evaluate_pairs(gen: Manifest, gt: Manifest, config: EvalConfig | None = None, meta: dict | None = None) -> EvalReport:
    """Mean L1/SSIM/PSNR over id-aligned pairs and set-wise FID (``path_x0`` of each record).

    FID is nan, with the reason in ``meta["fid_note"]``, when either set has
    fewer vectors than the feature dimension + 1.
    """
    config = config or EvalConfig()
    gen_ids, gt_ids = gen.by_id(), gt.by_id()
    if set(gen_ids) != set(gt_ids):
        missing = sorted(set(gt_ids) - set(gen_ids))[:5]
        extra = sorted(set(gen_ids) - set(gt_ids))[:5]
        raise ManifestMismatch(f"manifests do not align: missing {missing} extra {extra}")
    if not gt_ids:
        raise ManifestMismatch("empty manifests")
    ids = [r.id for r in gt]
    a = np.stack([load_image(gen.resolve(gen_ids[i].path_x0)) for i in ids]).astype(np.float64)
    b = np.stack([load_image(gt.resolve(gt_ids[i].path_x0)) for i in ids]).astype(np.float64)

    l1s = [l1(x, y) for x, y in zip(a, b)]
    ssims = [ssim(x, y, config.ssim_window, config.ssim_k1, config.ssim_k2, config.peak) for x, y in zip(a, b)]
    psnrs = [psnr(x, y, config.peak) for x, y in zip(a, b)]
    id_fn, feat_fn = EXTRACTORS[config.extractor]
    meta = dict(meta or {})
    try:
        fid_val = fid(feat_fn(a), feat_fn(b))
    except TooFewSamples as e:
        # pixel metrics are still meaningful on small sets
        fid_val = float("nan")
        meta["fid_note"] = str(e)
    digest = hashlib.sha256("\n".join(ids).encode("utf-8")).hexdigest()[:16]
    return EvalReport(
        metrics={"L1": float(np.mean(l1s)), "SSIM": float(np.mean(ssims)), "PSNR": float(np.mean(psnrs)), "FID": fid_val},
        n=len(ids),
        config=asdict(config),
        extractor_id=id_fn(),
        ids_sha256=digest,
        meta=meta,
    )
