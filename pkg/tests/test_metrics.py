import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from levelseg import metrics, synth
from levelseg.metrics import MetricsReport

pair_masks = st.integers(1, 12).flatmap(
    lambda n: st.tuples(arrays(np.bool_, (n, n)), arrays(np.bool_, (n, n))))


def block(n, top, left, h, w):
    m = np.zeros((n, n))
    m[top:top + h, left:left + w] = 1
    return m


def test_dice_examples():
    g = block(6, 1, 1, 2, 2)
    assert metrics.dice_score(g, g) == pytest.approx(1.0, abs=1e-6)
    assert metrics.dice_score(g, block(6, 4, 4, 2, 2)) == 0.0
    assert metrics.dice_score(g, block(6, 1, 2, 2, 2)) == pytest.approx(0.5, abs=1e-7)
    with pytest.raises(ValueError, match="mismatch"):
        metrics.dice_score(np.zeros((2, 2)), np.zeros((3, 3)))


def test_iou_examples():
    g = block(6, 1, 1, 2, 2)
    assert metrics.iou(g, g) == 1.0
    assert metrics.iou(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0
    y = np.zeros((6, 6))
    y[1, 1] = y[1, 2] = 1  # inside g
    y[5, 5] = y[5, 4] = 1  # outside g -> intersection 2, union 6
    assert metrics.iou(g, y) == pytest.approx(1 / 3)


@given(pair_masks)
def test_scores_bounded_and_related(masks):
    g, y = masks
    d = metrics.dice_score(g, y)
    i = metrics.iou(g, y)
    for v in (d, i, metrics.wcov(g, y), metrics.boundf(g, y)):
        assert 0.0 <= v <= 1.0
    if g.any() or y.any():  # both empty: IoU is 1 by convention while Dice is 0
        assert i <= d + 1e-6
        assert i == pytest.approx(d / (2 - d), abs=1e-6)


def test_label_components_connectivity():
    m = np.zeros((3, 3))
    m[0, 0] = m[1, 1] = 1
    assert metrics.label_components(m, 4).count == 2
    assert metrics.label_components(m, 8).count == 1
    assert metrics.label_components(np.zeros((4, 4))).count == 0
    with pytest.raises(ValueError):
        metrics.label_components(m, 6)


def test_labels_follow_raster_order():
    m = np.zeros((5, 5))
    m[0, 4] = 1
    m[2, 0] = 1
    m[4, 2:] = 1
    r = metrics.label_components(m)
    assert r.labels[0, 4] == 1 and r.labels[2, 0] == 2 and r.labels[4, 3] == 3
    assert r.sizes.tolist() == [1, 1, 3]
    assert r.sizes.sum() == m.sum()


@given(arrays(np.bool_, (16, 16)), st.sampled_from([4, 8]))
def test_label_count_matches_flood_fill(m, conn):
    r = metrics.label_components(m, conn)
    regions = synth.oracle_regions(m, conn)
    assert r.count == len(regions)
    assert sorted(r.sizes.tolist()) == sorted(len(x) for x in regions)


def test_wcov_examples():
    g = block(6, 0, 0, 2, 2) + block(6, 4, 4, 2, 2)
    assert metrics.wcov(g, g) == 1.0
    assert metrics.wcov(g, block(6, 0, 0, 2, 2)) == pytest.approx(0.5)
    assert metrics.wcov(np.zeros((4, 4)), np.zeros((4, 4))) == 1.0
    assert metrics.wcov(np.zeros((4, 4)), block(4, 0, 0, 1, 1)) == 0.0
    assert metrics.wcov(g, np.zeros((6, 6))) == 0.0


@given(pair_masks)
@settings(max_examples=150)
def test_wcov_matches_oracle(masks):
    g, y = masks
    assert metrics.wcov(g, y) == pytest.approx(synth.oracle_wcov(g, y), abs=1e-12)


def test_boundary_set():
    m = block(5, 1, 1, 3, 3)
    b = metrics.boundary(m)
    expected = m.copy()
    expected[2, 2] = 0
    assert np.array_equal(b, expected.astype(bool))
    # grid edge counts as background
    assert metrics.boundary(np.ones((3, 3))).sum() == 8


def test_boundf_examples():
    g = block(20, 5, 5, 10, 10)
    assert metrics.boundf(g, g) == 1.0
    assert metrics.boundf(g, np.roll(g, 1, axis=1)) == 1.0
    far = block(40, 5, 5, 10, 10)
    assert metrics.boundf(far, np.roll(far, 17, axis=1)) == 0.0
    assert metrics.boundf(np.zeros((4, 4)), np.zeros((4, 4))) == 1.0


def test_hausdorff_examples():
    a = np.zeros((6, 6))
    b = np.zeros((6, 6))
    a[0, 0] = 1
    b[3, 4] = 1
    assert metrics.hausdorff(a, b) == 5.0
    assert metrics.hausdorff(a, a) == 0.0
    assert metrics.hausdorff(a, np.zeros((6, 6))) == -1.0


@given(pair_masks)
@settings(max_examples=150)
def test_boundary_metrics_match_oracle(masks):
    g, y = masks
    bf, hd = synth.oracle_boundary_metrics(g, y)
    assert metrics.boundf(g, y) == pytest.approx(bf, abs=1e-12)
    assert metrics.hausdorff(g, y) == pytest.approx(hd, abs=1e-12)
    assert metrics.hausdorff(g, y) == metrics.hausdorff(y, g)


@given(pair_masks, st.integers(-2, 2), st.integers(-2, 2))
def test_translation_invariance(masks, dy, dx):
    g, y = masks
    n = g.shape[0]
    big_g = np.zeros((n + 6, n + 6), bool)
    big_y = np.zeros_like(big_g)
    big_g[3:3 + n, 3:3 + n] = g
    big_y[3:3 + n, 3:3 + n] = y
    sg = np.roll(big_g, (dy, dx), axis=(0, 1))
    sy = np.roll(big_y, (dy, dx), axis=(0, 1))
    a = metrics.evaluate(big_g, big_y)
    b = metrics.evaluate(sg, sy)
    assert (a.dice, a.iou, a.wcov, a.boundf, a.hausdorff) == (b.dice, b.iou, b.wcov, b.boundf, b.hausdorff)


def test_evaluate_and_mean():
    g = block(6, 0, 0, 2, 2) + block(6, 4, 4, 2, 2)
    r = metrics.evaluate(g, g)
    assert (r.iou, r.wcov, r.boundf, r.hausdorff) == (1.0, 1.0, 1.0, 0.0)
    assert r.dice == pytest.approx(1.0, abs=1e-6)
    assert r.pixel_count == 36
    assert metrics.evaluate(g, block(6, 0, 0, 2, 2)).wcov == pytest.approx(0.5)
    m = metrics.mean_report([MetricsReport(0.8, 0.5, 0.5, 0.5, 2.0, 4), MetricsReport(0.6, 0.5, 0.5, 0.5, -1.0, 4)])
    assert m.dice == pytest.approx(0.7)
    assert m.hausdorff == 2.0  # sentinel skipped
    with pytest.raises(ValueError):
        metrics.mean_report([])


def test_csv_format_round_trip():
    g = block(6, 1, 1, 3, 3)
    rows = [("b.pgm", metrics.evaluate(g, g)), ("a.pgm", metrics.evaluate(g, np.roll(g, 1, axis=0)))]
    text = metrics.format_csv(rows)
    lines = text.splitlines()
    assert lines[0] == "file,dice,iou,wcov,boundf,hausdorff"
    assert [line.split(",")[0] for line in lines[1:]] == ["a.pgm", "b.pgm", "MEAN"]
    assert all(len(v.split(".")[1]) == 6 for v in lines[1].split(",")[1:])
    parsed = metrics.parse_csv(text)
    assert parsed["b.pgm"]["iou"] == 1.0
    assert parsed["MEAN"]["iou"] == pytest.approx((1.0 + parsed["a.pgm"]["iou"]) / 2, abs=1e-6)
