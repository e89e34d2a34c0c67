"""Noise schedule, closed-form forward diffusion, the conditioned UNet noise
predictor and DDIM/DDPM samplers.

Timesteps are 1-based: ``t`` ranges over ``1..T`` and ``alpha_bar[t-1]`` is
the cumulative signal coefficient at step ``t``.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import InvalidRange, ShapeMismatch, StepOutOfRange, UntrainedModel


# ---------------------------------------------------------------------------
# schedule


@dataclass
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha_bar: np.ndarray

    def _check(self, t):
        tt = torch.as_tensor(t)
        if tt.numel() and (int(tt.min()) < 1 or int(tt.max()) > self.T):
            raise StepOutOfRange(f"timestep outside [1, {self.T}]: {t}")
        return tt.long()

    def alpha_bar_at(self, t, like: torch.Tensor | None = None) -> torch.Tensor:
        """ᾱ_t gathered for (a tensor of) timesteps, as float64 unless ``like`` is given."""
        tt = self._check(t)
        ab = torch.from_numpy(self.alpha_bar)[tt - 1]
        if like is not None:
            ab = ab.to(dtype=like.dtype, device=like.device)
        return ab

    def to_dict(self) -> dict:
        return {"T": self.T, "beta": self.beta.tolist()}

    @classmethod
    def from_betas(cls, beta) -> "NoiseSchedule":
        beta = np.asarray(beta, dtype=np.float64)
        return cls(len(beta), beta, np.cumprod(1.0 - beta))


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02, kind: str = "linear") -> NoiseSchedule:
    if T < 1:
        raise InvalidRange(f"T must be >= 1, got {T}")
    if not (0 < beta_start <= beta_end < 1):
        raise InvalidRange(f"need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]")
    if kind != "linear":
        raise InvalidRange(f"unsupported schedule kind {kind!r}")
    return NoiseSchedule.from_betas(np.linspace(beta_start, beta_end, T, dtype=np.float64))


def _bcast(v: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    v = v.to(dtype=x.dtype, device=x.device)
    if v.ndim == 0:
        return v
    return v.reshape(-1, *([1] * (x.ndim - 1)))


def forward_diffuse(z0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """z_t = √ᾱ_t·z0 + √(1−ᾱ_t)·ε."""
    if z0.shape != eps.shape:
        raise ShapeMismatch(f"z0 {tuple(z0.shape)} vs eps {tuple(eps.shape)}")
    ab = _bcast(sched.alpha_bar_at(t), z0)
    return ab.sqrt() * z0 + (1 - ab).sqrt() * eps


def coarse_denoise(z_t: torch.Tensor, eps_hat: torch.Tensor, t, sched: NoiseSchedule, literal: bool = False) -> torch.Tensor:
    """One-step estimate ẑ0 = (z_t − √(1−ᾱ_t)·ε̂)/√ᾱ_t.

    ``literal=True`` divides by ᾱ_t instead of √ᾱ_t (kept only for comparison).
    """
    if z_t.shape != eps_hat.shape:
        raise ShapeMismatch(f"z_t {tuple(z_t.shape)} vs eps_hat {tuple(eps_hat.shape)}")
    ab = _bcast(sched.alpha_bar_at(t), z_t)
    denom = ab if literal else ab.sqrt()
    return (z_t - (1 - ab).sqrt() * eps_hat) / denom


# ---------------------------------------------------------------------------
# noise predictor


@dataclass
class PredictorConfig:
    latent_channels: int = 4
    base_channels: int = 64
    channel_mult: tuple = (1, 2)
    num_res_blocks: int = 1
    attention_levels: tuple = (1,)
    cond_dim: int = 64
    num_tokens: int = 16
    heads: int = 4
    injection_mode: str = "input_add"  # input_add | control_branch
    mid_attention: bool = True
    noise_skip: bool = True  # learned 1×1 path from z_t to the output

    def __post_init__(self):
        self.channel_mult = tuple(self.channel_mult)
        self.attention_levels = tuple(self.attention_levels)
        if self.injection_mode not in ("input_add", "control_branch"):
            raise ValueError(f"unknown injection_mode {self.injection_mode!r}")


def _norm(ch: int) -> nn.GroupNorm:
    g = math.gcd(ch, 8)
    return nn.GroupNorm(g, ch)


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.double()[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def zero_module(m: nn.Module) -> nn.Module:
    for p in m.parameters():
        nn.init.zeros_(p)
    return m


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb_dim: int):
        super().__init__()
        self.norm1 = _norm(cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb_dim, cout)
        self.norm2 = _norm(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class CrossAttention(nn.Module):
    def __init__(self, dim: int, cond_dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim, bias=False)
        self.k = nn.Linear(cond_dim, dim, bias=False)
        self.v = nn.Linear(cond_dim, dim, bias=False)
        self.out = nn.Linear(dim, dim)

    def forward(self, x, c):
        b, n, d = x.shape
        h = self.heads
        q = self.q(x).view(b, n, h, d // h).transpose(1, 2)
        k = self.k(c).view(b, c.shape[1], h, d // h).transpose(1, 2)
        v = self.v(c).view(b, c.shape[1], h, d // h).transpose(1, 2)
        w = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(d // h), dim=-1)
        return self.out((w @ v).transpose(1, 2).reshape(b, n, d))


class SpatialCrossAttention(nn.Module):
    """Latent tokens attend to the condition sequence, then a feed-forward layer."""

    def __init__(self, ch: int, cond_dim: int, heads: int):
        super().__init__()
        heads = heads if ch % heads == 0 else 1
        self.norm = _norm(ch)
        self.proj_in = nn.Conv2d(ch, ch, 1)
        self.ln1 = nn.LayerNorm(ch)
        self.attn = CrossAttention(ch, cond_dim, heads)
        self.ln2 = nn.LayerNorm(ch)
        self.ff = nn.Sequential(nn.Linear(ch, 2 * ch), nn.GELU(), nn.Linear(2 * ch, ch))
        self.proj_out = nn.Conv2d(ch, ch, 1)

    def forward(self, x, c):
        b, ch, hh, ww = x.shape
        h = self.proj_in(self.norm(x)).flatten(2).transpose(1, 2)
        h = h + self.attn(self.ln1(h), c)
        h = h + self.ff(self.ln2(h))
        h = h.transpose(1, 2).reshape(b, ch, hh, ww)
        return x + self.proj_out(h)


class Stage(nn.Module):
    def __init__(self, res: ResBlock, attn: SpatialCrossAttention | None):
        super().__init__()
        self.res = res
        self.attn = attn

    def forward(self, x, temb, c):
        x = self.res(x, temb)
        return self.attn(x, c) if self.attn is not None else x


class Encoder(nn.Module):
    """Downsampling stages and middle block of the UNet.

    ``forward`` receives the ``conv_in`` output so the control branch can add
    its hint before the first stage.
    """

    def __init__(self, cfg: PredictorConfig, temb_dim: int):
        super().__init__()
        ch = cfg.base_channels
        self.conv_in = nn.Conv2d(cfg.latent_channels, ch, 3, padding=1)
        self.stages = nn.ModuleList()
        self.downs = nn.ModuleList()
        self.skip_channels = [ch]
        cur = ch
        for level, mult in enumerate(cfg.channel_mult):
            out = cfg.base_channels * mult
            for _ in range(cfg.num_res_blocks):
                attn = SpatialCrossAttention(out, cfg.cond_dim, cfg.heads) if level in cfg.attention_levels else None
                self.stages.append(Stage(ResBlock(cur, out, temb_dim), attn))
                self.skip_channels.append(out)
                cur = out
            if level != len(cfg.channel_mult) - 1:
                self.downs.append(nn.Conv2d(cur, cur, 3, stride=2, padding=1))
                self.skip_channels.append(cur)
            else:
                self.downs.append(nn.Identity())
        self.out_channels = cur
        self.mid1 = ResBlock(cur, cur, temb_dim)
        self.mid_attn = SpatialCrossAttention(cur, cfg.cond_dim, cfg.heads) if cfg.mid_attention else None
        self.mid2 = ResBlock(cur, cur, temb_dim)
        self._nres = cfg.num_res_blocks
        self._nlevels = len(cfg.channel_mult)

    def forward(self, h, temb, c):
        hs = [h]
        i = 0
        for level in range(self._nlevels):
            for _ in range(self._nres):
                h = self.stages[i](h, temb, c)
                hs.append(h)
                i += 1
            if level != self._nlevels - 1:
                h = self.downs[level](h)
                hs.append(h)
        h = self.mid1(h, temb)
        if self.mid_attn is not None:
            h = self.mid_attn(h, c)
        h = self.mid2(h, temb)
        return hs, h


class ControlBranch(nn.Module):
    """Trainable encoder copy fed with z_t plus the font feature; every output
    passes a zero-initialized 1×1 convolution before joining the main UNet."""

    def __init__(self, encoder: Encoder, time_embed: nn.Module, cfg: PredictorConfig):
        super().__init__()
        self.encoder = copy.deepcopy(encoder)
        self.time_embed = copy.deepcopy(time_embed)
        self.hint = nn.Conv2d(cfg.latent_channels, cfg.base_channels, 3, padding=1)
        self.zero_convs = nn.ModuleList(zero_module(nn.Conv2d(c, c, 1)) for c in encoder.skip_channels)
        self.zero_mid = zero_module(nn.Conv2d(encoder.out_channels, encoder.out_channels, 1))

    def forward(self, z_t, z_a, temb_in, c):
        temb = self.time_embed(temb_in)
        h = self.encoder.conv_in(z_t) + self.hint(z_a)
        hs, h = self.encoder(h, temb, c)
        return [zc(x) for zc, x in zip(self.zero_convs, hs)], self.zero_mid(h)


class NoisePredictor(nn.Module):
    """UNet P(z_t, z_a, c, t) with cross-attention to the condition tokens."""

    def __init__(self, cfg: PredictorConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or PredictorConfig()
        temb_dim = 4 * cfg.base_channels
        self._temb_in = cfg.base_channels
        self.time_embed = nn.Sequential(nn.Linear(cfg.base_channels, temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim))
        self.encoder = Encoder(cfg, temb_dim)

        self.up_stages = nn.ModuleList()
        self.ups = nn.ModuleList()
        skips = list(self.encoder.skip_channels)
        cur = self.encoder.out_channels
        for level in reversed(range(len(cfg.channel_mult))):
            out = cfg.base_channels * cfg.channel_mult[level]
            for _ in range(cfg.num_res_blocks + 1):
                attn = SpatialCrossAttention(out, cfg.cond_dim, cfg.heads) if level in cfg.attention_levels else None
                self.up_stages.append(Stage(ResBlock(cur + skips.pop(), out, temb_dim), attn))
                cur = out
            if level != 0:
                self.ups.append(nn.Sequential(nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(cur, cur, 3, padding=1)))
            else:
                self.ups.append(nn.Identity())
        self.norm_out = _norm(cur)
        self.conv_out = nn.Conv2d(cur, cfg.latent_channels, 3, padding=1)
        # at high t the target noise is almost z_t itself; without a direct path the
        # body has to copy white noise through every stage and plateaus well above zero
        self.noise_skip = None
        if cfg.noise_skip:
            self.noise_skip = nn.Conv2d(cfg.latent_channels, cfg.latent_channels, 1)
            nn.init.zeros_(self.noise_skip.weight)
            nn.init.zeros_(self.noise_skip.bias)

        self.control = ControlBranch(self.encoder, self.time_embed, cfg) if cfg.injection_mode == "control_branch" else None

    @property
    def downsample(self) -> int:
        return 2 ** (len(self.cfg.channel_mult) - 1)

    def check_inputs(self, z_t, z_a, c):
        cfg = self.cfg
        if z_t.ndim != 4 or z_t.shape[1] != cfg.latent_channels:
            raise ShapeMismatch(f"z_t must be N×{cfg.latent_channels}×h×w, got {tuple(z_t.shape)}")
        if z_a.shape != z_t.shape:
            raise ShapeMismatch(f"z_a {tuple(z_a.shape)} must match z_t {tuple(z_t.shape)}")
        if z_t.shape[-1] % self.downsample or z_t.shape[-2] % self.downsample:
            raise ShapeMismatch(f"latent size {tuple(z_t.shape[-2:])} not divisible by {self.downsample}")
        if c.ndim != 3 or c.shape[0] != z_t.shape[0] or c.shape[2] != cfg.cond_dim:
            raise ShapeMismatch(f"c must be N×N_tok×{cfg.cond_dim}, got {tuple(c.shape)}")

    def forward(self, z_t, z_a, c, t):
        self.check_inputs(z_t, z_a, c)
        t = torch.as_tensor(t, device=z_t.device)
        if t.ndim == 0:
            t = t.expand(z_t.shape[0])
        temb_in = timestep_embedding(t, self._temb_in).to(z_t.dtype)
        temb = self.time_embed(temb_in)

        x = z_t + z_a if self.control is None else z_t
        hs, h = self.encoder(self.encoder.conv_in(x), temb, c)
        if self.control is not None:
            ctrl_hs, ctrl_mid = self.control(z_t, z_a, temb_in, c)
            hs = [a + b for a, b in zip(hs, ctrl_hs)]
            h = h + ctrl_mid

        i = 0
        nlev = len(self.cfg.channel_mult)
        for j in range(nlev):
            for _ in range(self.cfg.num_res_blocks + 1):
                h = self.up_stages[i](torch.cat([h, hs.pop()], dim=1), temb, c)
                i += 1
            h = self.ups[j](h)
        out = self.conv_out(F.silu(self.norm_out(h)))
        return out if self.noise_skip is None else out + self.noise_skip(z_t)


def predict_noise(model: NoisePredictor, z_t, z_a, c, t) -> torch.Tensor:
    return model(z_t, z_a, c, t)


# ---------------------------------------------------------------------------
# sampling


def sampling_timesteps(T: int, num_steps: int) -> list[int]:
    if not 1 <= num_steps <= T:
        raise StepOutOfRange(f"num_steps must lie in [1, {T}], got {num_steps}")
    # evenly spaced from T down to 1; a single step starts at T
    ts = np.round(np.linspace(T, 1, num_steps)).astype(int)
    return [int(t) for t in ts]


@torch.no_grad()
def sample(
    model,
    lg: torch.Tensor,
    lr: torch.Tensor,
    y,
    sched: NoiseSchedule,
    num_steps: int = 50,
    seed: int = 0,
    sampler: str = "ddim",
    eta: float = 0.0,
    allow_untrained: bool = False,
    return_latent: bool = False,
    clip_latent: bool = True,
):
    """Generate images for source glyphs ``lg`` in the style of references ``lr``.

    ``model`` provides ``condition(lg, lr, prompts) -> (z_a, c)``, ``unet`` and
    ``codec``. ``lg``/``lr`` are N×3×H×W in [0, 1]; ``y`` is a prompt or list of
    prompts. Returns an N×3×H×W batch in [0, 1].

    With ``clip_latent`` the predicted clean latent is clamped to the codec's
    latent bound (if it has one) and the noise estimate is recomputed from it.
    """
    if not allow_untrained and not getattr(model, "trained", False):
        raise UntrainedModel("model parameters are uninitialized; train or load a checkpoint first")
    if lg.shape != lr.shape:
        raise ShapeMismatch(f"lg {tuple(lg.shape)} vs lr {tuple(lr.shape)}")
    if sampler not in ("ddim", "ddpm"):
        raise ValueError(f"unknown sampler {sampler!r}")
    prompts = [y] * lg.shape[0] if isinstance(y, str) else list(y)
    if len(prompts) != lg.shape[0]:
        raise ShapeMismatch(f"{len(prompts)} prompts for {lg.shape[0]} images")
    if sampler == "ddpm":
        eta = 1.0

    model.eval()
    z_a, c = model.condition(lg, lr, prompts)
    gen = torch.Generator(device="cpu").manual_seed(seed)
    shape = z_a.shape
    z = torch.randn(shape, generator=gen, dtype=z_a.dtype).to(z_a.device)

    bound = getattr(model.codec, "latent_bound", None) if clip_latent else None
    ts = sampling_timesteps(sched.T, num_steps)
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        tt = torch.full((shape[0],), t, dtype=torch.long, device=z.device)
        eps = model.unet(z, z_a, c, tt)
        ab = float(sched.alpha_bar[t - 1])
        ab_prev = float(sched.alpha_bar[t_prev - 1]) if t_prev > 0 else 1.0
        z0 = (z - math.sqrt(1 - ab) * eps) / math.sqrt(ab)
        if bound is not None:
            z0 = z0.clamp(-bound, bound)
            eps = (z - math.sqrt(ab) * z0) / math.sqrt(1 - ab)
        sigma = eta * math.sqrt((1 - ab_prev) / (1 - ab) * (1 - ab / ab_prev)) if t_prev > 0 else 0.0
        z = math.sqrt(ab_prev) * z0 + math.sqrt(max(1 - ab_prev - sigma**2, 0.0)) * eps
        if sigma > 0:
            z = z + sigma * torch.randn(shape, generator=gen, dtype=z.dtype).to(z.device)
    x = model.codec.decode(z)
    return (x, z) if return_latent else x
