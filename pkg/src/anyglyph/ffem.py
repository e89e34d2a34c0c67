"""Font fusion and embedding: z_a = F(G(l_g) ⊕ R(l_r)).

G (glyph block) and R (reference block) are independent residual conv stacks
that downsample images to the latent resolution; F is a 3×3 convolution over
their channel concatenation.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ShapeMismatch


class ConvResBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(math.gcd(ch, 8), ch)
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.norm2 = nn.GroupNorm(math.gcd(ch, 8), ch)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return x + h


class DownsampleStack(nn.Module):
    """conv_in, then per stage ``blocks_per_stage`` residual blocks and a stride-2 conv."""

    def __init__(self, downsample_factor: int, channels: int = 64, blocks_per_stage: int = 2):
        super().__init__()
        if downsample_factor < 1 or downsample_factor & (downsample_factor - 1):
            raise ValueError("downsample_factor must be a power of two")
        self.f = downsample_factor
        self.conv_in = nn.Conv2d(3, channels, 3, padding=1)
        layers = []
        for _ in range(int(math.log2(downsample_factor))):
            layers += [ConvResBlock(channels) for _ in range(blocks_per_stage)]
            layers.append(nn.Conv2d(channels, channels, 3, stride=2, padding=1))
        layers += [ConvResBlock(channels) for _ in range(blocks_per_stage if downsample_factor == 1 else 0)]
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeMismatch(f"expected N×3×H×W image batch, got {tuple(x.shape)}")
        if x.shape[-1] % self.f or x.shape[-2] % self.f:
            raise ShapeMismatch(f"image size {tuple(x.shape[-2:])} not divisible by {self.f}")
        return self.body(self.conv_in(x * 2.0 - 1.0))


class FFEM(nn.Module):
    def __init__(
        self,
        downsample_factor: int = 4,
        latent_channels: int = 4,
        channels: int = 64,
        blocks_per_stage: int = 2,
        zero_init_fusion: bool = False,
    ):
        super().__init__()
        self.glyph = DownsampleStack(downsample_factor, channels, blocks_per_stage)
        self.reference = DownsampleStack(downsample_factor, channels, blocks_per_stage)
        self.fusion = nn.Conv2d(2 * channels, latent_channels, 3, padding=1)
        if zero_init_fusion:
            nn.init.zeros_(self.fusion.weight)
            nn.init.zeros_(self.fusion.bias)

    def glyph_block(self, lg: torch.Tensor) -> torch.Tensor:
        return self.glyph(lg)

    def reference_block(self, lr: torch.Tensor) -> torch.Tensor:
        return self.reference(lr)

    def fuse(self, g_feat: torch.Tensor, r_feat: torch.Tensor) -> torch.Tensor:
        if g_feat.shape != r_feat.shape:
            raise ShapeMismatch(f"glyph features {tuple(g_feat.shape)} vs reference {tuple(r_feat.shape)}")
        if g_feat.shape[1] * 2 != self.fusion.in_channels:
            raise ShapeMismatch(f"fusion expects {self.fusion.in_channels // 2} channels per branch")
        return self.fusion(torch.cat([g_feat, r_feat], dim=1))

    def forward(self, lg: torch.Tensor, lr: torch.Tensor) -> torch.Tensor:
        return self.fuse(self.glyph_block(lg), self.reference_block(lr))
