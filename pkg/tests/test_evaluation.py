import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from mtgan import evaluation as ev
from mtgan.evaluation import Palette, PaletteEntry


def toy_palette(*colors):
    entries = [PaletteEntry(i, c, f"c{i}") for i, c in enumerate(colors)]
    entries.append(PaletteEntry(len(colors), (9, 9, 9), "void", ignored=True))
    return Palette(entries)


# -- palette ------------------------------------------------------------------------

def test_cityscapes_palette_shape():
    p = ev.cityscapes_palette()
    assert len(p) == 20 and len(p.class_ids) == 19
    assert p.ignored_id == 19
    assert p.id_of("car") == 13


def test_palette_validation():
    with pytest.raises(ValueError, match="distinct"):
        Palette([PaletteEntry(0, (1, 1, 1), "a"), PaletteEntry(1, (1, 1, 1), "b", True)])
    with pytest.raises(ValueError, match="contiguous"):
        Palette([PaletteEntry(0, (1, 1, 1), "a"), PaletteEntry(2, (2, 1, 1), "b", True)])
    with pytest.raises(ValueError, match="ignored"):
        Palette([PaletteEntry(0, (1, 1, 1), "a")])


def test_palette_text_round_trip(tmp_path):
    p = ev.cityscapes_palette()
    p.save(tmp_path / "pal.txt")
    q = Palette.load(tmp_path / "pal.txt")
    assert q.entries == p.entries
    with pytest.raises(ValueError, match="line 2"):
        Palette.loads("0 1 2 3 a\n1 2 3 b ignored\n")


def test_align_exact_color_and_distance_rule():
    p = ev.cityscapes_palette()
    img = p.colors[None, :, :]
    np.testing.assert_array_equal(ev.align_palette(img, p)[0], np.arange(20))
    two = Palette([PaletteEntry(0, (0, 0, 0), "black"), PaletteEntry(1, (255, 255, 255), "white", True)])
    assert ev.align_palette(np.array([[[100, 100, 100]]]), two)[0, 0] == 0


def test_align_tie_goes_to_lowest_id():
    p = Palette([PaletteEntry(0, (0, 0, 0), "a"), PaletteEntry(1, (2, 0, 0), "b", True)])
    assert ev.align_palette(np.array([[[1, 0, 0]]]), p)[0, 0] == 0


# -- segmentation metrics --------------------------------------------------------------

def test_seg_metrics_perfect():
    p = toy_palette((0, 0, 0), (255, 0, 0), (0, 255, 0))
    gt = np.array([[0, 1], [2, 3]])
    m = ev.seg_metrics(gt, gt, p)
    assert (m.per_pixel_acc, m.per_class_acc, m.mean_iou) == (1.0, 1.0, 1.0)


def test_seg_metrics_hand_computed():
    p = toy_palette((0, 0, 0), (255, 255, 255))
    gt = np.array([0, 0, 1, 1]).reshape(2, 2)
    pred = np.array([0, 1, 1, 1]).reshape(2, 2)
    m = ev.seg_metrics(pred, gt, p)
    assert abs(m.per_pixel_acc - 0.75) < 1e-9
    assert abs(m.per_class_acc - 0.75) < 1e-9
    assert abs(m.mean_iou - (0.5 + 2 / 3) / 2) < 1e-9
    cm, total = ev.confusion_matrix(pred, gt, p)
    np.testing.assert_array_equal(cm, [[1, 1], [0, 2]])
    assert total == 4


def test_seg_metrics_ignored_pixels():
    p = toy_palette((0, 0, 0), (255, 255, 255))
    void = p.ignored_id
    gt = np.array([0, 1, void, void])
    # predicting the ignored label counts as wrong for a valid gt pixel
    pred = np.array([void, 1, 0, 1])
    m = ev.seg_metrics(pred, gt, p)
    assert m.per_pixel_acc == 0.5
    assert m.per_class_acc == 0.5
    assert abs(m.mean_iou - 0.5) < 1e-12   # class 0: 0/1, class 1: 1/1
    with pytest.raises(ev.EvaluationError, match="no valid pixels"):
        ev.seg_metrics(np.zeros(3, int), np.full(3, void), p)


def seg_oracle(pred, gt, k, ignored):
    """Per-class loops with no confusion matrix."""
    keep = gt != ignored
    acc = np.mean(pred[keep] == gt[keep])
    cls, ious = [], []
    for c in range(k):
        g, q = (gt == c) & keep, (pred == c) & keep
        if g.any():
            cls.append(np.sum(g & q) / np.sum(g))
        if (g | q).any():
            ious.append(np.sum(g & q) / np.sum(g | q))
    return acc, np.mean(cls), np.mean(ious)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 6), st.integers(5, 200))
def test_seg_metrics_match_oracle(seed, k, n):
    rng = np.random.default_rng(seed)
    p = toy_palette(*[(i * 20, 0, 0) for i in range(k)])
    gt = rng.integers(0, k + 1, n)
    gt[0] = 0
    pred = rng.integers(0, k + 1, n)
    m = ev.seg_metrics(pred, gt, p)
    acc, cls, iou = seg_oracle(pred, gt, k, k)
    assert abs(m.per_pixel_acc - acc) < 1e-9
    assert abs(m.per_class_acc - cls) < 1e-9
    assert abs(m.mean_iou - iou) < 1e-9


# -- depth metrics -----------------------------------------------------------------------

def test_depth_metrics_examples():
    z = ev.depth_metrics(np.array([1000.0, 2500.0]), np.array([1000.0, 2500.0]))
    assert (z.rmse_mm, z.mae_mm, z.irmse_km, z.imae_km) == (0, 0, 0, 0)
    m = ev.depth_metrics(np.array([2000.0]), np.array([4000.0]))
    assert abs(m.rmse_mm - 2000) < 1e-9 and abs(m.mae_mm - 2000) < 1e-9
    assert abs(m.irmse_km - 250) < 1e-9 and abs(m.imae_km - 250) < 1e-9


def test_depth_metrics_formula_oracle(rng):
    gt = rng.uniform(1000, 20000, 500)
    gt[::7] = 0
    pred = rng.uniform(500, 25000, 500)
    m = ev.depth_metrics(pred, gt)
    v = gt > 0
    err = pred[v] - gt[v]
    inv = 1e6 / pred[v] - 1e6 / gt[v]
    assert abs(m.rmse_mm - np.sqrt(np.mean(err ** 2))) < 1e-9
    assert abs(m.mae_mm - np.mean(np.abs(err))) < 1e-9
    assert abs(m.irmse_km - np.sqrt(np.mean(inv ** 2))) < 1e-9
    assert abs(m.imae_km - np.mean(np.abs(inv))) < 1e-9


def test_depth_metrics_errors():
    with pytest.raises(ev.EvaluationError, match="no valid pixels"):
        ev.depth_metrics(np.ones(3), np.zeros(3))
    with pytest.raises(ev.EvaluationError):
        ev.depth_metrics(np.ones(3), np.ones(4))


def test_lower_median():
    assert ev.lower_median([4, 1, 3, 2]) == 2
    assert ev.lower_median([5, 1, 3]) == 3


def test_median_scale_align_examples(rng):
    gt = rng.uniform(1000, 9000, (8, 8))
    same, f = ev.median_scale_align(gt, gt)
    assert f == 1.0 and np.array_equal(same, gt)
    scaled, f = ev.median_scale_align(gt / 2, gt)
    assert f == 2.0
    np.testing.assert_allclose(scaled, gt, rtol=1e-15)
    with pytest.raises(ev.EvaluationError):
        ev.median_scale_align(np.zeros((2, 2)), np.ones((2, 2)))


def test_median_factor_matches_sort_oracle(rng):
    gt = rng.uniform(1000, 9000, 101)
    gt[rng.random(101) < 0.3] = 0
    pred = rng.uniform(10, 90, 101)
    _, f = ev.median_scale_align(pred, gt)
    v = gt > 0
    s_gt, s_pred = sorted(gt[v]), sorted(pred[v])
    k = (len(s_gt) - 1) // 2
    assert f == s_gt[k] / s_pred[k]


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 64, elements=st.floats(100, 60000)),
       arrays(np.float64, 64, elements=st.floats(500, 60000)),
       st.floats(0.1, 10.0))
def test_aligned_metrics_invariant_to_prediction_scale(pred, gt, c):
    a = ev.depth_metrics(ev.median_scale_align(pred, gt)[0], gt)
    b = ev.depth_metrics(ev.median_scale_align(pred * c, gt)[0], gt)
    for x, y in zip((a.rmse_mm, a.mae_mm, a.irmse_km, a.imae_km),
                    (b.rmse_mm, b.mae_mm, b.irmse_km, b.imae_km)):
        assert abs(x - y) <= 1e-6 * max(abs(x), 1.0)
    assert a.rmse_mm >= a.mae_mm


# -- reports -----------------------------------------------------------------------------

def test_report_csv_header_and_validation(tmp_path):
    r = ev.MetricsReport("val", 4, 0.5, 0.25, 0.125, 10.0, 5.0, 1.0, 0.5)
    ev.write_reports(tmp_path / "m.csv", [r])
    rows = list(csv.reader((tmp_path / "m.csv").open()))
    assert tuple(rows[0]) == ev.REPORT_HEADER
    assert rows[1][:2] == ["val", "4"] and float(rows[1][2]) == 0.5
    with pytest.raises(ev.EvaluationError, match="RMSE < MAE"):
        ev.MetricsReport("x", 1, rmse_mm=1.0, mae_mm=2.0).validate()
    with pytest.raises(ev.EvaluationError):
        ev.MetricsReport("x", 1, per_pixel_acc=1.5).validate()


def test_split_level_evaluation(rng):
    p = ev.cityscapes_palette()
    ids = [rng.integers(0, 19, (4, 5)) for _ in range(3)]
    rgbs = [p.colorize(i) for i in ids]
    m = ev.evaluate_segmentation(rgbs, ids, p)
    assert (m.per_pixel_acc, m.per_class_acc, m.mean_iou) == (1.0, 1.0, 1.0)
    gts = [rng.uniform(1000, 5000, (4, 5)) for _ in range(3)]
    d = ev.evaluate_depth([g * s for g, s in zip(gts, (0.5, 2.0, 7.0))], gts)
    assert d.rmse_mm < 1e-9
