import numpy as np
import pytest
import torch

from anyglyph import glyph_synth as gs
from anyglyph.config import TrainConfig

# criterion number -> PASS/FAIL line, filled by test_acceptance
ACCEPTANCE: dict[int, str] = {}

TINY = dict(
    batch=4,
    steps=3,
    T=100,
    image_size=32,
    codec_mode="fixed",
    downsample=2,
    base_channels=16,
    ffem_channels=16,
    cond_dim=32,
    num_tokens=32,
    image_embed_dim=32,
    patch_size=4,
    text_layers=1,
    heads=4,
    log_every=0,
    lr=1e-3,
)


@pytest.fixture(scope="session")
def tiny_cfg() -> TrainConfig:
    return TrainConfig(**TINY)


@pytest.fixture(scope="session")
def latin_data(tmp_path_factory):
    """latin26 × 2 styles at 32×32, one style held out."""
    root = tmp_path_factory.mktemp("latin")
    gs.build_dataset(gs.load_charset("latin26"), 2, 7, 0.5, root, canvas=32)
    return root


@pytest.fixture(scope="session")
def train_manifest(latin_data):
    return gs.Manifest.load(latin_data / "train.jsonl")


@pytest.fixture(scope="session")
def tiny_ckpt(tiny_cfg, train_manifest, tmp_path_factory):
    from anyglyph.trainer import train

    out = tmp_path_factory.mktemp("ckpt")
    train(tiny_cfg, train_manifest, out)
    return out / "final.agc"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
