"""The assembled generator: frozen codec, FFEM, VTFEM and the UNet predictor."""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .codec import CodecConfig, LatentCodec
from .config import TrainConfig
from .diffusion import NoisePredictor, PredictorConfig
from .ffem import FFEM
from .vtfem import VTFEM, VTFEMConfig, Vocab


class AnyGlyphModel(nn.Module):
    def __init__(self, cfg: TrainConfig, vocab: Vocab):
        super().__init__()
        self.cfg = cfg
        self.codec = LatentCodec(
            CodecConfig(cfg.downsample, cfg.latent_channels, cfg.codec_mode, cfg.codec_hidden)
        )
        self.ffem = FFEM(
            cfg.downsample,
            cfg.latent_channels,
            cfg.ffem_channels,
            cfg.ffem_blocks,
            zero_init_fusion=cfg.injection_mode == "control_branch",
        )
        self.vtfem = VTFEM(
            VTFEMConfig(
                num_tokens=cfg.num_tokens,
                cond_dim=cfg.cond_dim,
                image_embed_dim=cfg.image_embed_dim,
                patch_size=cfg.patch_size,
                text_layers=cfg.text_layers,
                text_heads=cfg.heads,
                use_ci=cfg.use_ci,
                use_ct=cfg.use_ct,
                freeze_text_encoder=cfg.freeze_text_encoder,
            ),
            vocab,
        )
        self.unet = NoisePredictor(
            PredictorConfig(
                latent_channels=cfg.latent_channels,
                base_channels=cfg.base_channels,
                channel_mult=cfg.channel_mult,
                num_res_blocks=cfg.num_res_blocks,
                attention_levels=cfg.attention_levels,
                cond_dim=cfg.cond_dim,
                num_tokens=cfg.num_tokens,
                heads=cfg.heads,
                injection_mode=cfg.injection_mode,
                noise_skip=cfg.noise_skip,
            )
        )
        self.trained = False

    @property
    def vocab(self) -> Vocab:
        return self.vtfem.vocab

    def condition(self, lg: torch.Tensor, lr: torch.Tensor, prompts) -> tuple[torch.Tensor, torch.Tensor]:
        """Font feature z_a and cross-attention condition c for a batch."""
        return self.ffem(lg, lr), self.vtfem(lr, prompts)

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    def frozen_parameter_names(self) -> list[str]:
        return [n for n, p in self.named_parameters() if not p.requires_grad]


def to_batch(img) -> torch.Tensor:
    """H×W×3 array (or N×H×W×3) in [0, 1] -> float32 N×3×H×W tensor."""
    if isinstance(img, torch.Tensor):
        return img if img.ndim == 4 else img.unsqueeze(0)
    arr = np.asarray(img, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr)).permute(0, 3, 1, 2).contiguous()


def to_images(x: torch.Tensor) -> np.ndarray:
    """N×3×H×W tensor -> N×H×W×3 float array."""
    return x.detach().cpu().permute(0, 2, 3, 1).numpy()
