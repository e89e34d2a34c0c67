import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from anyglyph.errors import InvalidCoefficient, ShapeMismatch
from anyglyph.losses import (
    FeatureExtractor,
    content_loss,
    default_extractor,
    diffusion_loss,
    feature_level_loss,
    gram,
    style_loss,
    total_loss,
)

from .gradcheck import fd_check

PHI64 = default_extractor(torch.float64)


def _imgs(n=2, size=8, seed=0):
    g = torch.Generator().manual_seed(seed)
    return [torch.rand(n, 3, size, size, generator=g, dtype=torch.float64) for _ in range(3)]


def np_gram(f):
    n, c, h, w = f.shape
    f = f.reshape(n, c, h * w)
    return np.einsum("nci,ndi->ncd", f, f) / (c * h * w)


def test_diffusion_loss_closed_forms():
    e = torch.randn(2, 4, 8, 8, dtype=torch.float64)
    assert float(diffusion_loss(e, e)) == 0.0
    assert float(diffusion_loss(torch.zeros(3, 5), torch.ones(3, 5))) == 1.0


def test_diffusion_loss_oracle():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((2, 4, 8, 8)), rng.standard_normal((2, 4, 8, 8))
    want = sum((x - y) ** 2 for x, y in zip(a.ravel(), b.ravel())) / a.size
    assert abs(float(diffusion_loss(torch.from_numpy(a), torch.from_numpy(b))) - want) < 1e-10


def test_diffusion_loss_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        diffusion_loss(torch.zeros(2, 3), torch.zeros(3, 2))


def test_extractor_deterministic_and_frozen():
    a, b = FeatureExtractor(), FeatureExtractor()
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb) and not pa.requires_grad
    a.train()
    assert not a.training
    feats = a(torch.rand(1, 3, 32, 32))
    assert [f.shape[1:] for f in feats] == [(8, 32, 32), (16, 16, 16), (32, 8, 8), (64, 4, 4)]


def test_identities():
    x, _, _ = _imgs()
    assert float(content_loss(x, x, PHI64)) == 0.0
    assert float(style_loss(x, x, PHI64)) == 0.0
    assert float(feature_level_loss(x, x, x, 1.0, PHI64)) == 0.0


def test_content_monotone_under_blending():
    for seed in range(5):
        lg, noise, _ = _imgs(1, 16, seed)
        vals = [float(content_loss((1 - a) * lg + a * noise, lg, PHI64)) for a in (0.0, 0.5, 1.0)]
        assert vals[0] <= vals[1] <= vals[2]


def test_gram_permutation_invariance():
    f = torch.randn(2, 5, 4, 4, dtype=torch.float64)
    perm = torch.randperm(16)
    shuffled = f.flatten(2)[:, :, perm].view_as(f)
    assert torch.allclose(gram(f), gram(shuffled), atol=1e-15)


def test_style_loss_oracle():
    x, lr, _ = _imgs(2, 16, 3)
    with torch.no_grad():
        fx, fr = PHI64(x), PHI64(lr)
    want = np.zeros(2)
    for a, b in zip(fx, fr):
        want += ((np_gram(a.numpy()) - np_gram(b.numpy())) ** 2).sum(axis=(1, 2))
    got = style_loss(x, lr, PHI64, reduction="none").detach().numpy()
    assert np.abs(got - want).max() < 1e-8
    assert abs(float(style_loss(x, lr, PHI64)) - want.mean()) < 1e-8


def test_feature_level_loss_composition():
    x, lg, lr = _imgs(3, 16, 4)
    ab = torch.tensor([0.3, 0.6, 0.95], dtype=torch.float64)
    c = content_loss(x, lg, PHI64, reduction="none")
    s = style_loss(x, lr, PHI64, reduction="none")
    want = float((ab * (c + s)).mean())
    assert abs(float(feature_level_loss(x, lg, lr, ab, PHI64)) - want) < 1e-10


@settings(max_examples=20, deadline=None)
@given(st.floats(0.01, 0.5), st.integers(0, 1000))
def test_feature_level_loss_linear_in_alpha_bar(a, seed):
    x, lg, lr = _imgs(2, 8, seed)
    v1 = float(feature_level_loss(x, lg, lr, a, PHI64))
    v2 = float(feature_level_loss(x, lg, lr, 2 * a, PHI64))
    assert v2 == pytest.approx(2 * v1, rel=1e-12, abs=1e-300)


def test_doubling_check():
    x, lg, lr = _imgs(2, 8, 7)
    assert float(feature_level_loss(x, lg, lr, 0.8, PHI64)) == pytest.approx(
        2 * float(feature_level_loss(x, lg, lr, 0.4, PHI64)), rel=1e-12)


@pytest.mark.parametrize("ab", [0.0, -0.1, 1.5, float("nan")])
def test_invalid_alpha_bar(ab):
    x, lg, lr = _imgs(1, 8)
    with pytest.raises(InvalidCoefficient):
        feature_level_loss(x, lg, lr, ab, PHI64)


def test_total_loss():
    assert total_loss(2.0, 3.0, 1.5) == 6.5
    l_df = torch.tensor(0.7)
    assert total_loss(l_df, torch.tensor(float("nan")), 0.0) is l_df
    assert total_loss.__defaults__ == (1.0,)
    with pytest.raises(InvalidCoefficient):
        total_loss(1.0, 1.0, -1.0)


@pytest.mark.parametrize("which", ["content", "style", "feature_level"])
def test_gradients_fd(which):
    x, lg, lr = _imgs(1, 8, 11)
    x.requires_grad_(True)
    fn = {
        "content": lambda: content_loss(x, lg, PHI64),
        "style": lambda: style_loss(x, lr, PHI64),
        "feature_level": lambda: feature_level_loss(x, lg, lr, 0.7, PHI64),
    }[which]
    assert fd_check(fn, x) < 1e-4


def test_lambda_zero_gradient_is_diffusion_gradient():
    torch.manual_seed(0)
    w = torch.randn(4, 4, dtype=torch.float64, requires_grad=True)
    eps = torch.randn(2, 4, dtype=torch.float64)
    inp = torch.randn(2, 4, dtype=torch.float64)
    x, lg, lr = _imgs(2, 8, 5)

    def grads(lam):
        w.grad = None
        eps_hat = inp @ w
        x_hat = (x + eps_hat.mean()).clamp(0, 1)
        total_loss(diffusion_loss(eps, eps_hat), feature_level_loss(x_hat, lg, lr, 0.5, PHI64), lam).backward()
        return w.grad.clone()

    w.grad = None
    diffusion_loss(eps, inp @ w).backward()
    pure = w.grad.clone()
    assert (grads(0.0) - pure).abs().max() < 1e-9
    assert (grads(1.0) - pure).abs().max() > 0
