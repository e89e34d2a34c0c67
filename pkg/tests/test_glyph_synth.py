import hashlib
import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from anyglyph import glyph_synth as gs
from anyglyph.errors import CanvasTooSmall, EmptyCharset, UnrenderableCodepoint


def _tree_digest(root):
    h = hashlib.sha256()
    for dirpath, _, files in sorted(os.walk(root)):
        for f in sorted(files):
            p = os.path.join(dirpath, f)
            h.update(os.path.relpath(p, root).encode())
            with open(p, "rb") as fh:
                h.update(fh.read())
    return h.hexdigest()


def test_render_contract():
    img = gs.render_glyph(gs.GlyphSpec("A", "bundled-sans", 128))
    assert img.shape == (128, 128, 3)
    assert img.min() >= 0 and img.max() <= 1
    frac = gs.foreground_mask(img).mean()
    assert 0.01 < frac < 0.9


def test_render_space_rejected():
    with pytest.raises(UnrenderableCodepoint):
        gs.render_glyph(gs.GlyphSpec(" "))


def test_render_missing_codepoint_rejected():
    # U+1F600 is not covered by the bundled subset
    with pytest.raises(UnrenderableCodepoint):
        gs.render_glyph(gs.GlyphSpec(0x1F600))


def test_render_deterministic():
    a = gs.render_glyph(gs.GlyphSpec("R"))
    b = gs.render_glyph(gs.GlyphSpec("R"))
    assert np.array_equal(a, b)


def test_canvas_too_small():
    with pytest.raises(CanvasTooSmall):
        gs.render_glyph(gs.GlyphSpec("A", canvas=4))


@pytest.mark.parametrize("preset", sorted(gs.PRESETS))
def test_every_preset_char_renders(preset):
    for cp in gs.load_charset(preset):
        img = gs.render_glyph(gs.GlyphSpec(cp, canvas=32))
        assert 0.01 < gs.foreground_mask(img).mean() < 0.9


def test_identity_style_is_identity():
    g = gs.render_glyph(gs.GlyphSpec("A"))
    out = gs.apply_style(g, gs.StyleParams.identity(), seed=3)
    assert np.abs(out - g).max() <= 1 / 255


def test_apply_style_deterministic():
    g = gs.render_glyph(gs.GlyphSpec("Q", canvas=64))
    style = gs.StyleParams.from_seed("s0003", 11, 64)
    assert np.array_equal(gs.apply_style(g, style, 5), gs.apply_style(g, style, 5))


def test_red_fill_has_red_foreground():
    g = gs.render_glyph(gs.GlyphSpec("A"))
    style = gs.StyleParams("red", fill=gs.Fill("solid", (220, 20, 20)))
    out = gs.apply_style(g, style)
    mask = gs.foreground_mask(g)
    assert out[mask, 0].mean() > out[mask, 2].mean()


@settings(max_examples=25, deadline=None)
@given(st.text(min_size=1, max_size=6).filter(lambda s: s.isalnum()), st.integers(0, 2**31 - 1))
def test_styles_stay_in_range(style_id, seed):
    g = gs.render_glyph(gs.GlyphSpec("B", canvas=32))
    out = gs.apply_style(g, gs.StyleParams.from_seed(style_id, seed, 32), seed)
    assert out.dtype == np.float32 and out.shape == g.shape
    assert out.min() >= 0 and out.max() <= 1


def test_make_prompt():
    assert gs.make_prompt("A", "s0007") == 'render glyph "A" in style s0007'
    assert gs.make_prompt("好", "s0001") == 'render glyph "好" in style s0001'


@given(st.characters(blacklist_categories=("Cs",)), st.characters(blacklist_categories=("Cs",)),
       st.from_regex(r"s[0-9]{4}", fullmatch=True), st.from_regex(r"s[0-9]{4}", fullmatch=True))
def test_make_prompt_injective(c1, c2, s1, s2):
    if (c1, s1) != (c2, s2):
        assert gs.make_prompt(c1, s1) != gs.make_prompt(c2, s2)


def test_build_dataset_counts(tmp_path):
    m = gs.build_dataset(gs.load_charset("latin26"), 4, 7, 0.75, tmp_path, canvas=32)
    assert len(m) == 104
    assert len((tmp_path / "manifest.jsonl").read_text().splitlines()) == 104
    x0_files = list((tmp_path / "train").rglob("*.png")) + list((tmp_path / "test").rglob("*.png"))
    assert len(x0_files) == 104
    meta = gs.read_dataset_meta(tmp_path)
    assert len(meta["train_styles"]) == 3 and len(meta["test_styles"]) == 1
    assert not set(meta["train_styles"]) & set(meta["test_styles"])
    train = gs.Manifest.load(tmp_path / "train.jsonl")
    test = gs.Manifest.load(tmp_path / "test.jsonl")
    assert {r.style_id for r in train}.isdisjoint({r.style_id for r in test})
    assert len(train) + len(test) == 104


def test_build_dataset_byte_identical(tmp_path):
    cs = gs.load_charset("latin26")[:6]
    gs.build_dataset(cs, 3, 5, 0.75, tmp_path / "a", canvas=32)
    gs.build_dataset(cs, 3, 5, 0.75, tmp_path / "b", canvas=32)
    assert _tree_digest(tmp_path / "a") == _tree_digest(tmp_path / "b")


def test_different_seed_changes_styles(tmp_path):
    cs = gs.load_charset("latin26")[:3]
    gs.build_dataset(cs, 2, 1, 1.0, tmp_path / "a", canvas=32)
    gs.build_dataset(cs, 2, 2, 1.0, tmp_path / "b", canvas=32)
    assert _tree_digest(tmp_path / "a") != _tree_digest(tmp_path / "b")


def test_manifest_validates(latin_data):
    m = gs.Manifest.load(latin_data)
    assert gs.validate_manifest(m, deep=True) == []
    for r in m:
        assert r.path_lr != r.path_x0


def test_validate_detects_leak(latin_data):
    m = gs.Manifest.load(latin_data)
    r = m.records[0]
    bad = gs.ManifestRecord(r.id, r.codepoint, r.style_id, r.path_x0, r.path_lg, r.path_x0, r.prompt)
    problems = gs.validate_manifest(gs.Manifest(m.root, [bad]))
    assert any("target character" in p for p in problems)


def test_validate_detects_foreign_style(latin_data):
    m = gs.Manifest.load(latin_data)
    a = m.records[0]
    other = next(r for r in m if r.style_id != a.style_id and r.codepoint != a.codepoint)
    bad = gs.ManifestRecord(a.id, a.codepoint, a.style_id, a.path_x0, a.path_lg, other.path_x0, a.prompt)
    assert gs.validate_manifest(gs.Manifest(m.root, [bad]))


def test_manifest_roundtrip(latin_data, tmp_path):
    m = gs.Manifest.load(latin_data)
    m.save(tmp_path / "copy.jsonl")
    assert (tmp_path / "copy.jsonl").read_bytes() == (latin_data / "manifest.jsonl").read_bytes()


def test_charset_errors(tmp_path):
    with pytest.raises(EmptyCharset):
        gs.build_dataset([], 1, 0, 1.0, tmp_path)
    empty = tmp_path / "empty.txt"
    empty.write_text("  \n", encoding="utf-8")
    with pytest.raises(EmptyCharset):
        gs.load_charset(str(empty))


def test_charset_file(tmp_path):
    f = tmp_path / "cs.txt"
    f.write_text("AB\nC", encoding="utf-8")
    assert gs.load_charset(str(f)) == [ord("A"), ord("B"), ord("C")]


def test_preset_sizes():
    assert len(gs.load_charset("latin26")) == 26
    assert len(gs.load_charset("chinese-mini")) == 100
    assert len(gs.load_charset("korean-mini")) == 60
