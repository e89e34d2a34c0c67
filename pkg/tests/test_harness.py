import math

import pytest

from anyglyph.config import TrainConfig
from anyglyph.errors import CorruptCheckpoint
from anyglyph.harness import (
    ABLATION_ROWS,
    ExperimentRecipe,
    ProbeReport,
    config_delta,
    load_reports,
    loss_ratio,
    row_slug,
    run_ablation_sweep,
    run_overfit_probe,
    summarize,
    write_summary,
)

from .conftest import TINY

TOGGLES = {"use_ci", "use_ct", "use_lfl", "lambda"}


def _tiny_recipe(**kw):
    train = {k: v for k, v in TINY.items() if k != "image_size"}
    base = dict(name="tiny", preset="latin26", chars="ABCDEF", n_styles=2, split=0.5, canvas=32,
                data_seed=3, train=train, sample_steps=2)
    return ExperimentRecipe(**{**base, **kw})


def test_row_structure():
    assert len(ABLATION_ROWS) == 7
    assert [r.name for r in ABLATION_ROWS] == [
        "baseline", "+c_i", "+c_t", "+c_i+c_t", "+all λ=0.5", "+all λ=1.0", "+all λ=1.5"]
    assert [r.name for r in ABLATION_ROWS if r.reference] == ["+all λ=1.0"]
    assert [r.lam for r in ABLATION_ROWS] == [None] * 4 + [0.5, 1.0, 1.5]
    assert len({row_slug(r) for r in ABLATION_ROWS}) == 7


def test_rows_differ_from_baseline_only_in_toggles():
    recipe = ExperimentRecipe.load("korean_mini_ablation")
    base = recipe.train_config(0).replace(**ABLATION_ROWS[0].deltas)
    for row in ABLATION_ROWS[1:]:
        delta = config_delta(base, recipe.train_config(0).replace(**row.deltas))
        assert delta and set(delta) <= TOGGLES, row.name


def test_bundled_recipes_load():
    for name in ("overfit_probe", "korean_mini_ablation", "mcgan_mini", "chinese_mini"):
        r = ExperimentRecipe.load(name)
        cfg = r.train_config(1)
        assert isinstance(cfg, TrainConfig) and cfg.seed == 1 and cfg.image_size == r.canvas
    probe = ExperimentRecipe.load("overfit_probe")
    assert len(probe.charset()) == 10 and probe.n_styles == 1
    cfg = probe.train_config()
    assert (cfg.codec_mode, cfg.T, cfg.steps, cfg.image_size) == ("fixed", 100, 2000, 32)


def test_recipe_roundtrip(tmp_path):
    r = _tiny_recipe(expect={"max_sample_l1": 0.05})
    back = ExperimentRecipe.load(r.save(tmp_path / "r.yaml"))
    assert back == r
    with pytest.raises(KeyError):
        ExperimentRecipe.from_dict({"name": "x", "bogus": 1})


def test_loss_ratio():
    trace = [{"L_total": 2.0}] * 10 + [{"L_total": 0.1}] * 100
    assert loss_ratio(trace) == pytest.approx((2.0, 0.1, 0.05), rel=1e-12)


def test_probe_report_text(tmp_path):
    rep = ProbeReport(False, 3, {"a": True, "b": False}, {"x": 1.5}, "boom", [{"step": 9}])
    text = rep.save(tmp_path / "p.txt").read_text()
    assert text.startswith("overfit probe seed=3: FAIL") and "b: FAIL" in text and "error: boom" in text and "'step': 9" in text


@pytest.fixture(scope="module")
def sweep(tmp_path_factory):
    out = tmp_path_factory.mktemp("sweep")
    reports = run_ablation_sweep(_tiny_recipe(), seeds=(0, 1), out_dir=out, steps=2, sample_steps=2)
    return out, reports


def test_sweep_produces_seven_rows(sweep):
    out, reports = sweep
    assert len(reports) == 14
    assert [r.meta["row"] for r in reports[::2]] == [r.name for r in ABLATION_ROWS]
    for r in reports:
        assert set(r.metrics) >= {"L1", "SSIM", "PSNR", "FID"}
        assert r.meta["steps"] == 2
    base = TrainConfig.load(out / row_slug(ABLATION_ROWS[0]) / "seed_0" / "config.yaml")
    for row in ABLATION_ROWS[1:]:
        cfg = TrainConfig.load(out / row_slug(row) / "seed_0" / "config.yaml")
        assert set(config_delta(base, cfg)) <= TOGGLES
    # 6 held-out glyphs are too few for the 32-D extractor
    assert math.isnan(reports[0].metrics["FID"])


def test_summary_regenerates_identically(sweep):
    out, reports = sweep
    first = (out / "summary.txt").read_bytes()
    assert write_summary(out).read_bytes() == first
    assert summarize(load_reports(out)).encode() == first
    text = first.decode()
    assert "+all λ=1.0 *" in text and "±" in text and "excluded" in text
    lines = text.splitlines()
    assert [l.split()[0] for l in lines[2:9]] == [r.name.split()[0] for r in ABLATION_ROWS]


def test_probe_corrupt_checkpoint_fails(tmp_path):
    rep = run_overfit_probe(0, tmp_path, _tiny_recipe(chars="ABCD", n_styles=1, split=1.0),
                            corrupt_checkpoint=True, steps=3)
    assert not rep.passed
    assert rep.values["error_type"] == "CorruptCheckpoint"
    assert "CorruptCheckpoint" in (tmp_path / "probe_report.txt").read_text()
    with pytest.raises(CorruptCheckpoint):
        from anyglyph.trainer import load_checkpoint

        load_checkpoint(tmp_path / "final.agc")


def test_probe_lambda_zero_short(tmp_path):
    rep = run_overfit_probe(0, tmp_path, _tiny_recipe(chars="ABCD", n_styles=1, split=1.0, expect={"max_loss_ratio": 2.0}),
                            check_sampling=False, steps=12, lambda_=0.0)
    assert rep.passed, rep.to_text()
    assert set(rep.checks) == {"loss_ratio < 2"}
    assert rep.trace_tail and all(r["L_fl"] == 0 for r in rep.trace_tail)
