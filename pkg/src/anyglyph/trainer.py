"""Training loop for L = L_df + λ·L_fl, plus the checkpoint container."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .codec import train_codec
from .config import TrainConfig
from .diffusion import NoiseSchedule, coarse_denoise, forward_diffuse, make_schedule
from .errors import CorruptCheckpoint, DatasetEmpty, NonFiniteLoss, ShapeMismatch, VersionMismatch
from .glyph_synth import PRESETS, Manifest, load_image
from .losses import diffusion_loss, feature_level_loss, total_loss
from .model import AnyGlyphModel
from .vtfem import Vocab

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# data


@dataclass
class GlyphData:
    ids: list
    x0: torch.Tensor
    lg: torch.Tensor
    lr: torch.Tensor
    prompts: list

    def __len__(self) -> int:
        return len(self.ids)

    def batch(self, idx) -> dict:
        idx = torch.as_tensor(idx, dtype=torch.long)
        return {
            "ids": [self.ids[i] for i in idx.tolist()],
            "x0": self.x0[idx],
            "lg": self.lg[idx],
            "lr": self.lr[idx],
            "prompts": [self.prompts[i] for i in idx.tolist()],
        }


def _load_stack(manifest: Manifest, paths) -> torch.Tensor:
    cache = {}
    out = []
    for p in paths:
        if p not in cache:
            cache[p] = load_image(manifest.resolve(p))
        out.append(cache[p])
    return torch.from_numpy(np.stack(out)).permute(0, 3, 1, 2).contiguous()


def load_data(manifest: Manifest, image_size: int | None = None) -> GlyphData:
    if len(manifest) == 0:
        raise DatasetEmpty("manifest has no samples")
    recs = list(manifest)
    data = GlyphData(
        ids=[r.id for r in recs],
        x0=_load_stack(manifest, [r.path_x0 for r in recs]),
        lg=_load_stack(manifest, [r.path_lg for r in recs]),
        lr=_load_stack(manifest, [r.path_lr for r in recs]),
        prompts=[r.prompt for r in recs],
    )
    if image_size is not None and tuple(data.x0.shape[-2:]) != (image_size, image_size):
        raise ShapeMismatch(f"dataset images are {tuple(data.x0.shape[-2:])}, config expects {image_size}")
    return data


def default_vocab(manifest: Manifest, num_tokens: int) -> Vocab:
    chars = set("".join(PRESETS.values()))
    chars.update(r.char for r in manifest)
    return Vocab.for_charset(chars, num_tokens)


# ---------------------------------------------------------------------------
# loss


def compute_losses(model: AnyGlyphModel, batch: dict, t: torch.Tensor, eps: torch.Tensor,
                   sched: NoiseSchedule, cfg: TrainConfig, with_lfl: bool | None = None) -> dict:
    """Forward pass for one batch with fixed ``t`` and ``eps``; returns the loss terms."""
    with torch.no_grad():
        z0 = model.codec.encode(batch["x0"])
    z_t = forward_diffuse(z0, t, eps, sched)
    z_a, c = model.condition(batch["lg"], batch["lr"], batch["prompts"])
    eps_hat = model.unet(z_t, z_a, c, t)
    l_df = diffusion_loss(eps, eps_hat)
    ab = sched.alpha_bar_at(t).to(eps_hat.dtype)

    use_lfl = cfg.use_lfl and cfg.lambda_ > 0 if with_lfl is None else with_lfl
    if use_lfl:
        z0_hat = coarse_denoise(z_t, eps_hat, t, sched, literal=cfg.denoise_literal)
        x_hat = model.codec.decode(z0_hat)
        l_fl = feature_level_loss(x_hat, batch["lg"], batch["lr"], ab)
        l_total = total_loss(l_df, l_fl, cfg.lambda_)
    else:
        l_fl = torch.zeros((), dtype=l_df.dtype)
        l_total = l_df
    return {"L_df": l_df, "L_fl": l_fl, "L_total": l_total, "alpha_bar_mean": ab.mean()}


def _step_generator(seed: int, step: int) -> torch.Generator:
    return torch.Generator().manual_seed((seed * 1_000_003 + step) % (2**63 - 1))


def batch_indices(n: int, batch: int, step: int, seed: int) -> torch.Tensor:
    """Indices for ``step``: epoch-wise permutations that depend only on (seed, step).

    A batch larger than the dataset concatenates extra permutations, so every
    sample appears ``batch // n`` or ``batch // n + 1`` times.
    """
    per_epoch = math.ceil(n / batch)
    epoch, k = divmod(step, per_epoch)
    perm = torch.randperm(n, generator=torch.Generator().manual_seed(zlib.crc32(f"{seed}:{epoch}".encode())))
    if batch <= n:
        return perm[k * batch : (k + 1) * batch]
    extra = [torch.randperm(n, generator=torch.Generator().manual_seed(zlib.crc32(f"{seed}:{epoch}:{r}".encode())))
             for r in range(1, math.ceil(batch / n))]
    return torch.cat([perm, *extra])[:batch]


def total_steps(cfg: TrainConfig, n: int) -> int:
    return cfg.steps if cfg.steps > 0 else cfg.epochs * math.ceil(n / cfg.batch)


# ---------------------------------------------------------------------------
# checkpoint container

MAGIC = b"ANYGLYPH"
FORMAT_VERSION = 1
_DTYPES = {
    torch.float32: "float32",
    torch.float64: "float64",
    torch.int64: "int64",
    torch.uint8: "uint8",
    torch.bool: "bool",
}


@dataclass
class Checkpoint:
    config: TrainConfig
    vocab: Vocab
    schedule: NoiseSchedule
    step: int
    model_state: dict
    optimizer_state: dict | None = None
    rng_state: torch.Tensor | None = None
    trace: list = field(default_factory=list)
    trained: bool = True

    def build_model(self) -> AnyGlyphModel:
        model = AnyGlyphModel(self.config, self.vocab)
        model.load_state_dict(self.model_state)
        model.codec.freeze()
        model.trained = self.trained
        return model


def _flatten_optimizer(state: dict | None):
    if state is None:
        return {}, None
    tensors = {}
    meta = {"param_groups": state["param_groups"], "state": {}}
    for idx, st in state["state"].items():
        meta["state"][str(idx)] = sorted(st.keys())
        for k, v in st.items():
            tensors[f"optim/{idx}/{k}"] = torch.as_tensor(v)
    return tensors, meta


def _unflatten_optimizer(meta, tensors):
    if meta is None:
        return None
    state = {int(idx): {k: tensors[f"optim/{idx}/{k}"] for k in keys} for idx, keys in meta["state"].items()}
    return {"state": state, "param_groups": meta["param_groups"]}


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    """Write the container: magic, version, JSON header, raw tensors, SHA-256 trailer."""
    tensors = {f"model/{k}": v for k, v in ckpt.model_state.items()}
    opt_tensors, opt_meta = _flatten_optimizer(ckpt.optimizer_state)
    tensors.update(opt_tensors)
    if ckpt.rng_state is not None:
        tensors["rng/torch"] = ckpt.rng_state

    index, blobs, offset = [], [], 0
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise TypeError(f"cannot serialize {name} with dtype {t.dtype}")
        raw = t.numpy().tobytes()
        index.append({"name": name, "dtype": _DTYPES[t.dtype], "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)

    header = {
        "format_version": FORMAT_VERSION,
        "config": ckpt.config.to_dict(),
        "vocab": ckpt.vocab.to_dict(),
        "schedule": ckpt.schedule.to_dict(),
        "step": ckpt.step,
        "trained": ckpt.trained,
        "optimizer": opt_meta,
        "trace": ckpt.trace,
        "tensors": index,
    }
    hbytes = json.dumps(header, sort_keys=True, ensure_ascii=False).encode("utf-8")
    body = MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(hbytes)) + hbytes + b"".join(blobs)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(body + hashlib.sha256(body).digest())
    return path


def load_checkpoint(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise CorruptCheckpoint(f"cannot read checkpoint {path}: {e}") from e
    if len(data) < len(MAGIC) + 12 + 32 or data[: len(MAGIC)] != MAGIC:
        raise CorruptCheckpoint(f"{path}: not an anyglyph checkpoint")
    version, hlen = struct.unpack_from("<IQ", data, len(MAGIC))
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptCheckpoint(f"{path}: checksum mismatch (truncated or modified)")
    start = len(MAGIC) + 12
    try:
        header = json.loads(body[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptCheckpoint(f"{path}: bad header") from e
    blob = body[start + hlen :]
    rev = {v: k for k, v in _DTYPES.items()}
    tensors = {}
    for e in header["tensors"]:
        raw = blob[e["offset"] : e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise CorruptCheckpoint(f"{path}: tensor {e['name']} truncated")
        arr = np.frombuffer(raw, dtype=e["dtype"]).reshape(e["shape"]).copy()
        tensors[e["name"]] = torch.from_numpy(arr).to(rev[e["dtype"]])

    sched = NoiseSchedule.from_betas(header["schedule"]["beta"])
    return Checkpoint(
        config=TrainConfig.from_dict(header["config"]),
        vocab=Vocab.from_dict(header["vocab"]),
        schedule=sched,
        step=header["step"],
        model_state={k[6:]: v for k, v in tensors.items() if k.startswith("model/")},
        optimizer_state=_unflatten_optimizer(header["optimizer"], tensors),
        rng_state=tensors.get("rng/torch"),
        trace=header["trace"],
        trained=header["trained"],
    )


# ---------------------------------------------------------------------------
# training


def make_optimizer(model: AnyGlyphModel, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(model.trainable_parameters(), lr=cfg.lr, betas=(cfg.adam_beta1, cfg.adam_beta2), eps=cfg.adam_eps)


def lr_at(cfg: TrainConfig, step: int, total: int) -> float:
    if cfg.lr_decay == "none":
        return cfg.lr
    if cfg.lr_decay == "cosine":
        return 0.5 * cfg.lr * (1.0 + math.cos(math.pi * step / max(total, 1)))
    raise ValueError(f"unknown lr_decay {cfg.lr_decay!r}")


def build_fresh(cfg: TrainConfig, manifest: Manifest, data: GlyphData | None = None) -> AnyGlyphModel:
    """Seeded model construction; trains the learned codec first, then freezes it."""
    torch.manual_seed(cfg.seed)
    model = AnyGlyphModel(cfg, default_vocab(manifest, cfg.num_tokens))
    if model.codec.trainable and cfg.codec_steps > 0:
        data = data or load_data(manifest, cfg.image_size)
        for p in model.codec.parameters():
            p.requires_grad_(True)
        _, trace = train_codec(data.x0, steps=cfg.codec_steps, seed=cfg.seed, batch=cfg.batch, lr=cfg.codec_lr, codec=model.codec)
        log.info("codec L1 %.4f -> %.4f", trace[0], trace[-1])
    model.codec.freeze()
    return model


def _write_trace(path: Path, rows, append: bool):
    with open(path, "a" if append else "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r) + "\n")


def train(cfg: TrainConfig, manifest: Manifest, out_dir=None, resume: Checkpoint | None = None,
          model: AnyGlyphModel | None = None, stop_at: int | None = None) -> Checkpoint:
    """Run (or resume) training up to ``total_steps(cfg)`` or ``stop_at``.

    With ``out_dir`` the loss trace is written to ``loss_trace.jsonl`` and
    checkpoints to ``ckpt_<step>.agc`` / ``final.agc``.
    """
    data = load_data(manifest, cfg.image_size)
    sched = make_schedule(cfg.T, *cfg.beta_range())
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    if resume is not None:
        model = resume.build_model()
        start, trace = resume.step, list(resume.trace)
        opt = make_optimizer(model, cfg)
        if resume.optimizer_state is not None:
            opt.load_state_dict(resume.optimizer_state)
        if resume.rng_state is not None:
            torch.set_rng_state(resume.rng_state)
    else:
        model = model or build_fresh(cfg, manifest, data)
        start, trace = 0, []
        opt = make_optimizer(model, cfg)
    if out is not None and start == 0:
        _write_trace(out / "loss_trace.jsonl", [], append=False)

    total = total_steps(cfg, len(data))
    end = total if stop_at is None else stop_at
    params = model.trainable_parameters()
    model.train()
    model.codec.eval()
    step = start
    for step in range(start, end):
        idx = batch_indices(len(data), cfg.batch, step, cfg.seed)
        batch = data.batch(idx)
        gen = _step_generator(cfg.seed, step)
        t = torch.randint(1, cfg.T + 1, (len(idx),), generator=gen)
        eps = torch.randn((len(idx), *model.codec.latent_shape(cfg.image_size, cfg.image_size)), generator=gen)
        with_lfl = cfg.use_lfl and cfg.lambda_ > 0 and step % max(cfg.lfl_stride, 1) == 0
        losses = compute_losses(model, batch, t, eps, sched, cfg, with_lfl=with_lfl)
        if not torch.isfinite(losses["L_total"]):
            if out is not None:
                (out / "nonfinite.json").write_text(json.dumps({"step": step, "batch_ids": batch["ids"],
                                                                 **{k: float(v.detach()) for k, v in losses.items()}}) + "\n")
            raise NonFiniteLoss(f"non-finite loss at step {step}", step=step, batch_ids=batch["ids"])
        for grp in opt.param_groups:
            grp["lr"] = lr_at(cfg, step, total)
        opt.zero_grad(set_to_none=True)
        losses["L_total"].backward()
        if cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
        opt.step()

        row = {"step": step, **{k: float(v.detach()) for k, v in losses.items()}}
        trace.append(row)
        if out is not None:
            _write_trace(out / "loss_trace.jsonl", [row], append=True)
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("step %d L_df %.5f L_fl %.5f", step, row["L_df"], row["L_fl"])
        if out is not None and cfg.ckpt_every and (step + 1) % cfg.ckpt_every == 0:
            save_checkpoint(_snapshot(model, opt, cfg, sched, step + 1, trace), out / f"ckpt_{step + 1:07d}.agc")

    model.eval()
    model.trained = True
    ckpt = _snapshot(model, opt, cfg, sched, max(end, start), trace)
    if out is not None:
        save_checkpoint(ckpt, out / "final.agc")
    return ckpt


def _snapshot(model, opt, cfg, sched, step, trace) -> Checkpoint:
    return Checkpoint(
        config=cfg,
        vocab=model.vocab,
        schedule=sched,
        step=step,
        model_state={k: v.detach().clone() for k, v in model.state_dict().items()},
        optimizer_state=_clone_state(opt.state_dict()),
        rng_state=torch.get_rng_state(),
        trace=list(trace),
        trained=True,
    )


def _clone_state(sd: dict) -> dict:
    return {
        "state": {k: {kk: vv.clone() if isinstance(vv, torch.Tensor) else vv for kk, vv in v.items()} for k, v in sd["state"].items()},
        "param_groups": json.loads(json.dumps(sd["param_groups"])),
    }
