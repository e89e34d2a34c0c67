"""Training objectives: diffusion MSE, feature content/style losses, the
ᾱ_t-weighted coarse feature-level loss and their weighted total."""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .errors import InvalidCoefficient, ShapeMismatch

PHI_SEED = 20240917
PHI_CHANNELS = (8, 16, 32, 64)
CONTENT_LEVEL = 3  # 1-based


class FeatureExtractor(nn.Module):
    """Frozen, seeded, randomly initialized 4-level conv pyramid Φ.

    Level 1 keeps full resolution; each later level halves it. Weights depend
    only on ``seed`` so the extractor is identical across runs and processes.
    """

    def __init__(self, channels=PHI_CHANNELS, seed: int = PHI_SEED):
        super().__init__()
        self.seed = seed
        self.channels = tuple(channels)
        gen = torch.Generator().manual_seed(seed)
        self.convs = nn.ModuleList()
        cin = 3
        for i, cout in enumerate(self.channels):
            conv = nn.Conv2d(cin, cout, 3, stride=1 if i == 0 else 2, padding=1)
            with torch.no_grad():
                fan_in = cin * 9
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * (2.0 / fan_in) ** 0.5)
                conv.bias.copy_(torch.randn(conv.bias.shape, generator=gen) * 0.1)
            self.convs.append(conv)
            cin = cout
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    @property
    def extractor_id(self) -> str:
        return f"phi-rand{len(self.channels)}-{'x'.join(map(str, self.channels))}-seed{self.seed}"

    def train(self, mode: bool = True):
        return super().train(False)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeMismatch(f"expected N×3×H×W image batch, got {tuple(x.shape)}")
        feats = []
        h = x * 2.0 - 1.0
        for conv in self.convs:
            h = F.silu(conv(h))
            feats.append(h)
        return feats

    def pooled(self, x: torch.Tensor, level: int = CONTENT_LEVEL) -> torch.Tensor:
        """Global-average-pooled level features, N×C; the default FID embedding."""
        return self(x)[level - 1].mean(dim=(2, 3))


_PHI_CACHE: dict = {}


def default_extractor(dtype=torch.float32, device="cpu") -> FeatureExtractor:
    key = (dtype, str(device))
    if key not in _PHI_CACHE:
        _PHI_CACHE[key] = FeatureExtractor().to(dtype=dtype, device=device)
    return _PHI_CACHE[key]


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise ShapeMismatch(f"{what}: {tuple(a.shape)} vs {tuple(b.shape)}")


def diffusion_loss(eps: torch.Tensor, eps_hat: torch.Tensor) -> torch.Tensor:
    _same_shape(eps, eps_hat, "diffusion_loss")
    return ((eps - eps_hat) ** 2).mean()


def gram(feat: torch.Tensor) -> torch.Tensor:
    """Channel Gram matrix normalized by channels × spatial size, N×C×C."""
    n, c, h, w = feat.shape
    f = feat.reshape(n, c, h * w)
    return f @ f.transpose(1, 2) / (c * h * w)


def _per_sample(x: torch.Tensor, reduction: str) -> torch.Tensor:
    return x.mean() if reduction == "mean" else x


def content_loss(x_hat, lg, phi: FeatureExtractor | None = None, reduction: str = "mean") -> torch.Tensor:
    """MSE between level-3 Φ features."""
    _same_shape(x_hat, lg, "content_loss")
    phi = phi or default_extractor(x_hat.dtype, x_hat.device)
    a = phi(x_hat)[CONTENT_LEVEL - 1]
    b = phi(lg)[CONTENT_LEVEL - 1]
    return _per_sample(((a - b) ** 2).flatten(1).mean(dim=1), reduction)


def style_loss(x_hat, lr, phi: FeatureExtractor | None = None, reduction: str = "mean") -> torch.Tensor:
    """Sum over Φ levels of the squared Frobenius distance between Gram matrices."""
    _same_shape(x_hat, lr, "style_loss")
    phi = phi or default_extractor(x_hat.dtype, x_hat.device)
    total = 0.0
    for fa, fb in zip(phi(x_hat), phi(lr)):
        total = total + ((gram(fa) - gram(fb)) ** 2).sum(dim=(1, 2))
    return _per_sample(total, reduction)


def feature_level_loss(x_hat, lg, lr, alpha_bar_t, phi: FeatureExtractor | None = None) -> torch.Tensor:
    """Batch mean of ᾱ_t·(content(x̂0, l_g) + style(x̂0, l_r)); ``alpha_bar_t`` is a scalar or per-sample."""
    ab = torch.as_tensor(alpha_bar_t, dtype=x_hat.dtype, device=x_hat.device)
    if not torch.isfinite(ab).all() or (ab <= 0).any() or (ab > 1).any():
        raise InvalidCoefficient(f"alpha_bar_t must lie in (0, 1], got {alpha_bar_t}")
    per = content_loss(x_hat, lg, phi, reduction="none") + style_loss(x_hat, lr, phi, reduction="none")
    return (ab * per).mean()


def total_loss(l_df, l_fl, lam: float = 1.0):
    if lam < 0:
        raise InvalidCoefficient(f"lambda must be >= 0, got {lam}")
    if lam == 0:
        return l_df
    return l_df + lam * l_fl
