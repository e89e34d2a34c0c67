"""Latent image codec: encoder E and decoder D.

Images are batched ``N×3×H×W`` tensors in [0, 1]; latents are ``N×c_lat×h×w``
with ``h = H/f``. ``fixed`` mode is an exact space-to-depth rearrangement,
``learned`` mode a small convolutional autoencoder trained with L1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ShapeMismatch


@dataclass
class CodecConfig:
    downsample_factor: int = 4
    latent_channels: int = 4
    mode: str = "learned"  # learned | fixed
    hidden: int = 32

    def __post_init__(self):
        f = self.downsample_factor
        if f < 1 or f & (f - 1):
            raise ValueError(f"downsample_factor must be a power of two, got {f}")
        if self.mode not in ("learned", "fixed"):
            raise ValueError(f"unknown codec mode {self.mode!r}")
        if self.mode == "fixed" and self.latent_channels != 3 * f * f:
            raise ValueError(f"fixed mode needs latent_channels = 3*f^2 = {3 * f * f}")

    @classmethod
    def fixed(cls, downsample_factor: int = 2) -> "CodecConfig":
        return cls(downsample_factor, 3 * downsample_factor**2, "fixed")


def _act() -> nn.Module:
    return nn.SiLU()


class LatentCodec(nn.Module):
    def __init__(self, config: CodecConfig | None = None):
        super().__init__()
        self.config = config or CodecConfig()
        cfg = self.config
        self.f = cfg.downsample_factor
        if cfg.mode == "learned":
            n_down = int(math.log2(self.f))
            ch = cfg.hidden
            enc = [nn.Conv2d(3, ch, 3, padding=1), _act()]
            for _ in range(n_down):
                enc += [nn.Conv2d(ch, ch, 4, stride=2, padding=1), _act(), nn.Conv2d(ch, ch, 3, padding=1), _act()]
            enc += [nn.Conv2d(ch, cfg.latent_channels, 3, padding=1)]
            dec = [nn.Conv2d(cfg.latent_channels, ch, 3, padding=1), _act()]
            for _ in range(n_down):
                dec += [nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(ch, ch, 3, padding=1), _act(),
                        nn.Conv2d(ch, ch, 3, padding=1), _act()]
            dec += [nn.Conv2d(ch, 3, 3, padding=1)]
            self.encoder = nn.Sequential(*enc)
            self.decoder = nn.Sequential(*dec)

    @property
    def latent_channels(self) -> int:
        return self.config.latent_channels

    @property
    def trainable(self) -> bool:
        return self.config.mode == "learned"

    def latent_shape(self, height: int, width: int) -> tuple[int, int, int]:
        if height % self.f or width % self.f:
            raise ShapeMismatch(f"{height}×{width} not divisible by downsample factor {self.f}")
        return (self.latent_channels, height // self.f, width // self.f)

    def freeze(self) -> "LatentCodec":
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        return self

    @property
    def latent_bound(self) -> float | None:
        # fixed latents are rescaled pixels, so they never leave [-1, 1]
        return 1.0 if self.config.mode == "fixed" else None

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeMismatch(f"expected N×3×H×W image batch, got {tuple(x.shape)}")
        self.latent_shape(x.shape[-2], x.shape[-1])
        x = x * 2.0 - 1.0
        if self.config.mode == "fixed":
            return F.pixel_unshuffle(x, self.f)
        return self.encoder(x)

    def decode(self, z: torch.Tensor, clamp: bool = True) -> torch.Tensor:
        if z.ndim != 4 or z.shape[1] != self.latent_channels:
            raise ShapeMismatch(f"expected N×{self.latent_channels}×h×w latent, got {tuple(z.shape)}")
        if self.config.mode == "fixed":
            x = F.pixel_shuffle(z, self.f)
        else:
            x = self.decoder(z)
        x = (x + 1.0) / 2.0
        return x.clamp(0.0, 1.0) if clamp else x


def reconstruction_l1(codec: LatentCodec, x: torch.Tensor) -> float:
    with torch.no_grad():
        return float((codec.decode(codec.encode(x)) - x).abs().mean())


def _manifest_images(manifest) -> torch.Tensor:
    from .glyph_synth import load_image

    paths = sorted({r.path_x0 for r in manifest})
    arr = np.stack([load_image(manifest.resolve(p)) for p in paths])
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()


def train_codec(
    images,
    config: CodecConfig | None = None,
    steps: int = 200,
    seed: int = 0,
    batch: int = 16,
    lr: float = 2e-3,
    val_size: int = 8,
    codec: LatentCodec | None = None,
):
    """Fit a learned codec to ``images`` (N×3×H×W tensor, or a Manifest whose
    ``path_x0`` images are used) with an L1 reconstruction loss.

    Returns ``(codec, trace)``; ``trace`` holds the validation L1 before training
    and after every step, measured on the first ``val_size`` images.
    """
    if not isinstance(images, torch.Tensor):
        images = _manifest_images(images)
    if codec is None:
        torch.manual_seed(seed)
        codec = LatentCodec(config)
    if not codec.trainable:
        raise ValueError("train_codec requires a learned-mode codec")
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(codec.parameters(), lr=lr)
    val = images[:val_size]
    trace = [reconstruction_l1(codec, val)]
    n = images.shape[0]
    codec.train()
    for _ in range(steps):
        idx = torch.randint(0, n, (min(batch, n),), generator=gen)
        x = images[idx]
        loss = (codec.decode(codec.encode(x), clamp=False) - x).abs().mean()
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        trace.append(reconstruction_l1(codec, val))
    codec.eval()
    return codec, trace
