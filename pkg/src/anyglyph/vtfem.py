"""Vision-text fusion and embedding: c = c_i + c_t.

c_i comes from a frozen patch encoder E_I followed by a trainable linear F_I;
c_t from a character-level transformer text encoder E_T. Both are
``N_tok×d`` token sequences consumed by the UNet's cross-attention.
"""

from __future__ import annotations

import math
import string
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import EmptyPrompt, ShapeMismatch

VOCAB_VERSION = "char-v1"
PAD, UNK = 0, 1
TEMPLATE_CHARS = 'render glyph "" in style ' + string.digits + string.ascii_lowercase


class Vocab:
    """Character-level tokenizer: id 0 pads, id 1 marks unknown characters."""

    def __init__(self, chars, max_length: int = 32, version: str = VOCAB_VERSION):
        self.tokens = "".join(sorted(set(chars)))
        self.max_length = max_length
        self.version = version
        self._ids = {ch: i + 2 for i, ch in enumerate(self.tokens)}

    @classmethod
    def for_charset(cls, charset, max_length: int = 32) -> "Vocab":
        chars = set(TEMPLATE_CHARS)
        chars.update(chr(c) if isinstance(c, int) else c for c in charset)
        return cls(chars, max_length)

    def __len__(self) -> int:
        return len(self.tokens) + 2

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.to_dict() == other.to_dict()

    def encode(self, text: str) -> list[int]:
        if not text:
            raise EmptyPrompt("prompt is empty")
        ids = [self._ids.get(ch, UNK) for ch in text[: self.max_length]]
        return ids + [PAD] * (self.max_length - len(ids))

    def encode_batch(self, texts) -> torch.Tensor:
        return torch.tensor([self.encode(t) for t in texts], dtype=torch.long)

    def to_dict(self) -> dict:
        return {"version": self.version, "max_length": self.max_length, "tokens": self.tokens}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocab":
        return cls(d["tokens"], d["max_length"], d["version"])


@dataclass
class VTFEMConfig:
    num_tokens: int = 32
    cond_dim: int = 64
    image_embed_dim: int = 64
    patch_size: int = 4
    text_layers: int = 2
    text_heads: int = 4
    use_ci: bool = True
    use_ct: bool = True
    freeze_text_encoder: bool = False


def sinusoidal_positions(n: int, d: int) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float64)[:, None]
    i = torch.arange(0, d, 2, dtype=torch.float64)
    angle = pos / torch.pow(10000.0, i / d)
    pe = torch.zeros(n, d, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle[:, : d // 2])
    return pe


class PatchImageEncoder(nn.Module):
    """Small patch-embedding encoder standing in for a pretrained image tower."""

    def __init__(self, patch_size: int, dim: int, num_tokens: int):
        super().__init__()
        self.patch_size = patch_size
        self.num_tokens = num_tokens
        self.patch = nn.Conv2d(3, dim, patch_size, stride=patch_size)
        self.norm = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeMismatch(f"expected N×3×H×W image batch, got {tuple(x.shape)}")
        if x.shape[-1] % self.patch_size or x.shape[-2] % self.patch_size:
            raise ShapeMismatch(f"image size {tuple(x.shape[-2:])} not divisible by patch {self.patch_size}")
        h = self.patch(x * 2.0 - 1.0).flatten(2).transpose(1, 2)  # N×P×dim
        h = h + sinusoidal_positions(h.shape[1], h.shape[2]).to(h)
        h = h + self.mlp(self.norm(h))
        # resample the patch sequence to the fixed token count
        return F.adaptive_avg_pool1d(h.transpose(1, 2), self.num_tokens).transpose(1, 2)


class TextEncoder(nn.Module):
    def __init__(self, vocab_size: int, num_tokens: int, dim: int, layers: int, heads: int):
        super().__init__()
        self.num_tokens = num_tokens
        self.embed = nn.Embedding(vocab_size, dim)
        layer = nn.TransformerEncoderLayer(dim, heads, 2 * dim, dropout=0.0, activation="gelu", batch_first=True, norm_first=True)
        self.layers = nn.TransformerEncoder(layer, layers, enable_nested_tensor=False)
        self.norm = nn.LayerNorm(dim)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        h = self.embed(ids)
        h = h + sinusoidal_positions(ids.shape[1], h.shape[-1]).to(h)
        h = self.layers(h, src_key_padding_mask=ids == PAD)
        return self.norm(h)


class VTFEM(nn.Module):
    def __init__(self, cfg: VTFEMConfig, vocab: Vocab):
        super().__init__()
        self.cfg = cfg
        self.vocab = vocab
        if vocab.max_length != cfg.num_tokens:
            raise ShapeMismatch(f"vocab max_length {vocab.max_length} != num_tokens {cfg.num_tokens}")
        if cfg.use_ci:
            self.image_encoder = PatchImageEncoder(cfg.patch_size, cfg.image_embed_dim, cfg.num_tokens)
            for p in self.image_encoder.parameters():
                p.requires_grad_(False)
            self.image_proj = nn.Linear(cfg.image_embed_dim, cfg.cond_dim)
        if cfg.use_ct:
            self.text_encoder = TextEncoder(len(vocab), cfg.num_tokens, cfg.cond_dim, cfg.text_layers, cfg.text_heads)
            if cfg.freeze_text_encoder:
                for p in self.text_encoder.parameters():
                    p.requires_grad_(False)
        if not (cfg.use_ci or cfg.use_ct):
            self.null_cond = nn.Parameter(torch.randn(cfg.num_tokens, cfg.cond_dim) * 0.02)

    def encode_reference(self, lr: torch.Tensor) -> torch.Tensor:
        return self.image_proj(self.image_encoder(lr))

    def encode_prompt(self, y) -> torch.Tensor:
        if isinstance(y, str):
            y = [y]
        ids = y if isinstance(y, torch.Tensor) else self.vocab.encode_batch(y)
        return self.text_encoder(ids.to(self._device()))

    @staticmethod
    def combine(c_i: torch.Tensor, c_t: torch.Tensor) -> torch.Tensor:
        if c_i.shape != c_t.shape:
            raise ShapeMismatch(f"c_i {tuple(c_i.shape)} vs c_t {tuple(c_t.shape)}")
        return c_i + c_t

    def _device(self):
        return next(self.parameters()).device

    def forward(self, lr: torch.Tensor, prompts) -> torch.Tensor:
        if self.cfg.use_ci and self.cfg.use_ct:
            return self.combine(self.encode_reference(lr), self.encode_prompt(prompts))
        if self.cfg.use_ci:
            return self.encode_reference(lr)
        if self.cfg.use_ct:
            return self.encode_prompt(prompts)
        return self.null_cond.unsqueeze(0).expand(lr.shape[0], -1, -1)
