import pytest
import torch
from hypothesis import given, settings, strategies as st

from anyglyph.errors import EmptyPrompt, ShapeMismatch
from anyglyph.glyph_synth import PRESETS, make_prompt
from anyglyph.vtfem import PAD, UNK, VTFEM, Vocab, VTFEMConfig

VOCAB = Vocab.for_charset("".join(PRESETS.values()), 16)


def _vtfem(**kw):
    torch.manual_seed(0)
    cfg = VTFEMConfig(num_tokens=16, cond_dim=32, image_embed_dim=24, patch_size=4, text_layers=1, text_heads=4, **kw)
    return VTFEM(cfg, VOCAB)


def test_shapes_agree():
    m = _vtfem()
    lr = torch.rand(3, 3, 32, 32)
    prompts = [make_prompt(c, "s0001") for c in "ABC"]
    c_i, c_t = m.encode_reference(lr), m.encode_prompt(prompts)
    assert c_i.shape == c_t.shape == (3, 16, 32)
    assert m(lr, prompts).shape == (3, 16, 32)


@pytest.mark.parametrize("size", [16, 32, 64])
def test_reference_shape_any_size(size):
    assert _vtfem().encode_reference(torch.rand(1, 3, size, size)).shape == (1, 16, 32)


def test_combine_is_addition():
    a, b = torch.randn(2, 16, 32), torch.randn(2, 16, 32)
    assert torch.equal(VTFEM.combine(a, b), a + b)
    assert torch.equal(VTFEM.combine(a, b), VTFEM.combine(b, a))
    assert torch.equal(VTFEM.combine(torch.zeros_like(b), b), b)
    with pytest.raises(ShapeMismatch):
        VTFEM.combine(a, torch.randn(2, 8, 32))


def test_forward_is_sum_of_parts():
    m = _vtfem()
    lr = torch.rand(2, 3, 32, 32)
    y = ["render glyph \"A\" in style s0000", "render glyph \"B\" in style s0001"]
    assert torch.equal(m(lr, y), m.encode_reference(lr) + m.encode_prompt(y))


def test_no_ci_equals_text_only():
    m = _vtfem(use_ci=False)
    lr = torch.rand(2, 3, 32, 32)
    y = ["a", "b"]
    assert torch.equal(m(lr, y), m.encode_prompt(y))
    assert not hasattr(m, "image_encoder")


def test_no_ct_equals_image_only():
    m = _vtfem(use_ct=False)
    lr = torch.rand(2, 3, 32, 32)
    assert torch.equal(m(lr, ["a", "b"]), m.encode_reference(lr))


def test_baseline_is_learned_constant():
    m = _vtfem(use_ci=False, use_ct=False)
    a = m(torch.rand(2, 3, 32, 32), ["a", "b"])
    b = m(torch.rand(2, 3, 32, 32), ["c", "d"])
    assert torch.equal(a, b) and a.shape == (2, 16, 32)
    assert m.null_cond.requires_grad


def test_different_references_differ():
    m = _vtfem()
    a, b = torch.rand(1, 3, 32, 32), torch.rand(1, 3, 32, 32)
    assert (m.encode_reference(a) - m.encode_reference(b)).abs().max() > 0


def test_prompt_deterministic():
    m = _vtfem()
    y = make_prompt("好", "s0001")
    assert torch.equal(m.encode_prompt(y), m.encode_prompt(y))


def test_truncation_keeps_shape():
    m = _vtfem()
    y = "render glyph \"A\" in style " + "s0001" * 20
    assert len(y) > 16
    assert m.encode_prompt(y).shape == (1, 16, 32)
    assert VOCAB.encode(y) == VOCAB.encode(y[:16])


def test_empty_prompt():
    with pytest.raises(EmptyPrompt):
        VOCAB.encode("")


def test_unknown_char_maps_to_unk():
    assert VOCAB.encode("☃")[0] == UNK
    assert VOCAB.encode("A")[1:] == [PAD] * 15


@settings(max_examples=50)
@given(st.text(alphabet="".join(PRESETS.values()) + "abc s\"", min_size=1, max_size=16), st.data())
def test_tokenizer_injective_on_charset(y, data):
    i = data.draw(st.integers(0, len(y) - 1))
    ch = data.draw(st.sampled_from(sorted(set(VOCAB.tokens) - {y[i]})))
    y2 = y[:i] + ch + y[i + 1 :]
    assert VOCAB.encode(y) != VOCAB.encode(y2)


def test_vocab_roundtrip():
    assert Vocab.from_dict(VOCAB.to_dict()) == VOCAB


def test_image_encoder_frozen_after_step():
    m = _vtfem()
    frozen = {n: p.detach().clone() for n, p in m.image_encoder.named_parameters()}
    proj = m.image_proj.weight.detach().clone()
    opt = torch.optim.Adam([p for p in m.parameters() if p.requires_grad], lr=1e-2)
    loss = m(torch.rand(2, 3, 32, 32), ["a", "b"]).pow(2).mean()
    loss.backward()
    opt.step()
    for n, p in m.image_encoder.named_parameters():
        assert torch.equal(p, frozen[n]) and not p.requires_grad
    assert not torch.equal(m.image_proj.weight, proj)


def test_freeze_text_encoder_flag():
    m = _vtfem(freeze_text_encoder=True)
    assert all(not p.requires_grad for p in m.text_encoder.parameters())
