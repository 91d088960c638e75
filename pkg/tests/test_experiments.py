import json

import numpy as np
import pytest
from PIL import Image

from qualdiff import degrade
from qualdiff.colormap import LUT, apply_colormap
from qualdiff.denoiser import DenoiserConfig
from qualdiff.errors import InvalidInputError
from qualdiff.experiments import (
    EvalReport,
    ablate_loss,
    ablate_prompting,
    ablate_threshold,
    evaluate,
    inspect,
    parse_mode,
)
from qualdiff.partition import PartitionParams, RegionPartition
from qualdiff.prompts import complexity
from qualdiff.qualmap import read_quality_map, score_no_reference
from qualdiff.trainer import ImageSet, TrainConfig, init_state

CATS = sorted(degrade.CATEGORIES)


def cfg(**kw):
    base = dict(image_size=16, batch_size=2, denoiser=DenoiserConfig(width=8), partition=PartitionParams(min_side=4))
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def hetero():
    return ImageSet.from_samples([degrade.make_sample(900 + i, 16, CATS[i % 11], f"h{i}") for i in range(4)])


@pytest.fixture(scope="module")
def all_clean():
    cleans = [degrade.make_sample(950 + i, 16, "haze").clean for i in range(3)]
    return ImageSet([f"c{i}" for i in range(3)], cleans, cleans)


def test_eval_report_rows_and_integrity(tmp_path, hetero):
    report, restored, reps = evaluate(init_state(cfg()), hetero, seed=1)
    assert len(report.rows) == len(hetero) and restored.shape == hetero.degraded.shape
    psnr_mean = np.mean([r.psnr_db for r in report.rows])
    assert report.aggregate["psnr_db"]["mean"] == psnr_mean
    report.save(tmp_path)
    doc = json.loads((tmp_path / "eval.json").read_text())
    again = EvalReport.from_json(doc)
    assert again.rows == report.rows
    doc["aggregate"]["ssim"]["mean"] += 1e-6
    with pytest.raises(InvalidInputError, match="ssim"):
        EvalReport.from_json(doc)
    header = (tmp_path / "eval.csv").read_text().splitlines()[0].split(",")
    assert header[:3] == ["sample_id", "psnr_db", "ssim"]


def test_evaluate_is_deterministic(hetero):
    state = init_state(cfg())
    a, _, _ = evaluate(state, hetero, seed=3)
    b, _, _ = evaluate(state, hetero, seed=3)
    assert a.to_json() == b.to_json()


def test_evaluate_needs_clean(hetero):
    with pytest.raises(InvalidInputError):
        evaluate(init_state(cfg()), ImageSet(hetero.ids, hetero.degraded_np), seed=0)


def test_prompting_ablation_budgets(hetero, all_clean):
    c = cfg()
    modes = [f"fixed-{c.complexity.c_min}", f"fixed-{c.complexity.c_max}", "adaptive"]
    rows = ablate_prompting(c, None, hetero, modes, steps=0, scorer_mode="full-reference")
    assert [r["mode"] for r in rows] == modes
    lo, hi, ad = (r["budget_per_region"] for r in rows)
    assert lo == c.complexity.c_min and hi == c.complexity.c_max
    assert lo < ad < hi
    (clean_row,) = ablate_prompting(c, None, all_clean, ["adaptive"], steps=0, scorer_mode="full-reference")
    assert clean_row["budget_per_region"] == c.complexity.c_min


def test_mode_parsing():
    assert parse_mode("adaptive") is None and parse_mode("fixed-10") == 10
    for bad in ("fixed", "fixed-x", "random"):
        with pytest.raises(InvalidInputError):
            parse_mode(bad)


def test_threshold_ablation_routes_without_changing_complexity(hetero):
    c = cfg()
    rows = ablate_threshold(c, None, hetero, [1.0, 3.0, 5.0], steps=0, scorer_mode="full-reference")
    assert [r["tau"] for r in rows] == [1.0, 3.0, 5.0]
    assert len({r["complexity_histogram"] for r in rows}) == 1
    total = rows[0]["regions_high"] + rows[0]["regions_low"]
    assert rows[0]["regions_low"] == 0
    hist = json.loads(rows[-1]["complexity_histogram"])
    below_max = total - hist.get(str(c.complexity.c_min), 0)
    assert rows[-1]["regions_low"] >= below_max


def test_loss_ablation_zeroes_weights(hetero):
    rows = ablate_loss(cfg(), hetero, hetero, steps=1)
    assert [r["variant"] for r in rows] == ["noise", "noise+quality", "noise+percep", "full"]
    assert [(r["lambda1"], r["lambda2"]) for r in rows] == [(0.0, 0.0), (0.5, 0.0), (0.0, 0.1), (0.5, 0.1)]
    with pytest.raises(InvalidInputError):
        ablate_loss(cfg(), hetero, hetero, ["adversarial"])


def test_inspect_artifacts(tmp_path, hetero):
    image = hetero.degraded_np[0]
    c = cfg()
    paths = inspect(image, tmp_path, c, image_key="h0")
    with Image.open(paths["heatmap"]) as im:
        assert im.size == (image.shape[1], image.shape[0]) and im.mode == "RGB"
    qmap = read_quality_map(paths["quality_map"])
    assert np.array_equal(qmap.values, score_no_reference(image).values)
    part = RegionPartition.from_json(json.loads(paths["partition"].read_text()))
    regions = json.loads(paths["regions"].read_text())
    assert len(regions) == len(part.regions)
    for r in regions:
        assert r["C_p"] == complexity(r["q_r"], c.complexity)
        assert r["source_pool"] == ("high" if r["q_r"] > c.tau else "low")


def test_inspect_uniform_image_single_region(tmp_path):
    paths = inspect(np.full((16, 16, 3), 0.5), tmp_path, cfg())
    assert len(json.loads(paths["partition"].read_text())["regions"]) == 1


def test_inspect_is_byte_stable(tmp_path, hetero):
    a = inspect(hetero.degraded_np[1], tmp_path / "a", cfg())
    b = inspect(hetero.degraded_np[1], tmp_path / "b", cfg())
    for k in a:
        assert a[k].read_bytes() == b[k].read_bytes()


def test_colormap_endpoints_and_monotone_luminance():
    img = apply_colormap(np.array([[1.0, 3.0, 5.0, 0.0, 9.0]]))
    assert img.dtype == np.uint8 and img.shape == (1, 5, 3)
    for col, idx in ((0, 0), (1, 128), (2, 255), (3, 0), (4, 255)):
        assert np.array_equal(img[0, col], LUT[idx])
    lum = LUT.astype(float) @ [0.2126, 0.7152, 0.0722]
    assert np.all(np.diff(lum) >= -1)


def test_report_with_identical_inputs_stays_strict_json(tmp_path, all_clean):
    report, _, _ = evaluate(init_state(cfg()), all_clean, seed=0)
    assert report.aggregate["psnr_input_db"] == {"mean": float("inf"), "std": 0.0}
    report.save(tmp_path)
    text = (tmp_path / "eval.json").read_text()
    assert "Infinity" not in text and '"inf"' in text
    again = EvalReport.from_json(json.loads(text))
    assert again.rows[0].psnr_input_db == float("inf")


def test_sample_named_inf_is_not_a_number():
    from qualdiff.experiments import EvalRow

    row = EvalRow("inf", 20.0, 0.5, 10.0, 0.4, 2.0, 3.0, 4, 40)
    again = EvalReport.from_json(EvalReport([row]).to_json())
    assert again.rows[0].sample_id == "inf"
