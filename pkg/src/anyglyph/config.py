"""Training configuration and its human-readable YAML form."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

import yaml

# dataclass field -> key used in config files and overrides
_ALIASES = {"lambda_": "lambda"}
_REVERSE = {v: k for k, v in _ALIASES.items()}


@dataclass
class TrainConfig:
    # optimisation (reference-scale defaults: Adam, lr 1e-5, batch 16, 30 epochs, λ = 1)
    lr: float = 1e-5
    batch: int = 16
    epochs: int = 30
    steps: int = 0  # > 0 overrides epochs
    lambda_: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    lr_decay: str = "none"  # none | cosine (to zero at the last step)
    seed: int = 0

    # diffusion
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    scale_betas: bool = True  # multiply the β range by 1000/T so short schedules still end near pure noise
    denoise_literal: bool = False

    # ablation toggles
    use_ci: bool = True
    use_ct: bool = True
    use_lfl: bool = True
    lfl_stride: int = 1

    # data / codec
    image_size: int = 128
    codec_mode: str = "learned"  # learned | fixed
    downsample: int = 4
    latent_channels: int = 4
    codec_steps: int = 500
    codec_lr: float = 2e-3
    codec_hidden: int = 32

    # noise predictor
    injection_mode: str = "input_add"  # input_add | control_branch
    noise_skip: bool = True
    base_channels: int = 64
    channel_mult: tuple = (1, 2)
    num_res_blocks: int = 1
    attention_levels: tuple = (1,)
    heads: int = 4

    # font fusion
    ffem_channels: int = 64
    ffem_blocks: int = 2

    # vision-text conditioning (reference full scale: 77 tokens × 768)
    num_tokens: int = 32
    cond_dim: int = 64
    image_embed_dim: int = 64
    patch_size: int = 8
    text_layers: int = 2
    freeze_text_encoder: bool = False

    # bookkeeping
    log_every: int = 50
    ckpt_every: int = 0

    def __post_init__(self):
        for f in fields(self):
            setattr(self, f.name, _coerce(f.default, getattr(self, f.name), f.name))
        if self.lambda_ < 0:
            raise ValueError("lambda must be >= 0")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.lr_decay not in ("none", "cosine"):
            raise ValueError(f"lr_decay must be none or cosine, got {self.lr_decay!r}")
        if self.codec_mode == "fixed" and self.latent_channels != 3 * self.downsample**2:
            self.latent_channels = 3 * self.downsample**2

    def beta_range(self) -> tuple[float, float]:
        k = 1000.0 / self.T if self.scale_betas else 1.0
        return min(self.beta_start * k, 0.5), min(self.beta_end * k, 0.999)

    @classmethod
    def keys(cls) -> list[str]:
        return [_ALIASES.get(f.name, f.name) for f in fields(cls)]

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[_ALIASES.get(f.name, f.name)] = list(v) if isinstance(v, tuple) else v
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = [k for k in d if k not in cls.keys()]
        if unknown:
            raise KeyError(f"unknown config keys {unknown}; valid keys: {', '.join(cls.keys())}")
        return cls(**{_REVERSE.get(k, k): v for k, v in d.items()})

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=None)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_yaml(), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> "TrainConfig":
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        return cls.from_dict(data)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **{_REVERSE.get(k, k): v for k, v in changes.items()})

    def with_overrides(self, overrides) -> "TrainConfig":
        """Apply ``key=value`` strings (values parsed as YAML scalars)."""
        changes = parse_overrides(overrides)
        bad = [k for k in changes if k not in self.keys()]
        if bad:
            raise KeyError(f"unknown override keys {bad}; valid keys: {', '.join(self.keys())}")
        return self.replace(**changes)


def _coerce(default, value, name):
    # YAML 1.1 reads "1e-5" as a string; cast by the field's default type
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(value)
                return value.lower() in ("true", "1", "yes")
            return bool(value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(float(value)) if isinstance(value, str) else int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            return tuple(int(v) for v in value)
    except (TypeError, ValueError) as e:
        raise ValueError(f"invalid value for {_ALIASES.get(name, name)}: {value!r}") from e
    return value


def parse_overrides(items) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise KeyError(f"override {item!r} is not of the form key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = yaml.safe_load(v)
    return out
