import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edgeseg.config import ConfigError, SynthConfig
from edgeseg.kmeans import DEFAULT_K, kmeans, kmeans_features
from edgeseg.metrics import Counts, Evaluator, boundary, default_band_radius, edge_band, edge_band_metrics, f_score, fg_iou
from edgeseg.synth import MaskPair, generate, load_dataset, read_manifest, render_sample, synth_sample, write_dataset

# -- synthetic data -----------------------------------------------------------------


def test_same_index_same_bytes():
    cfg = SynthConfig(seed=3)
    a, ma = synth_sample(cfg, 7)
    b, mb = synth_sample(cfg, 7)
    assert a.tobytes() == b.tobytes()
    assert ma.text_mask.tobytes() == mb.text_mask.tobytes()


def test_different_index_differs():
    cfg = SynthConfig()
    assert synth_sample(cfg, 0)[0].tobytes() != synth_sample(cfg, 1)[0].tobytes()


def test_zero_glyphs_gives_empty_masks():
    img, masks = synth_sample(SynthConfig(words=(0, 0)), 0)
    assert img.shape == (64, 64, 3) and img.dtype == np.uint8
    assert not masks.text_mask.any() and not masks.area_mask.any()


def _scalar_coverage(stroke, y, x):
    """Second, independent rasterization: one pixel, one primitive, plain math."""
    half = stroke.width / 2.0
    if stroke.kind == "seg":
        x0, y0, x1, y1 = stroke.params
        vx, vy = x1 - x0, y1 - y0
        denom = vx * vx + vy * vy
        t = 0.0 if denom == 0 else max(0.0, min(1.0, ((x - x0) * vx + (y - y0) * vy) / denom))
        return math.hypot(x0 + t * vx - x, y0 + t * vy - y) <= half
    cx, cy, rx, ry, a0, a1 = stroke.params
    u, v = (x - cx) / rx, (y - cy) / ry
    if abs(math.hypot(u, v) - 1.0) * min(rx, ry) > half:
        return False
    if a1 - a0 >= 360.0:
        return True
    ang = math.degrees(math.atan2(-v, u)) % 360.0
    lo = a0 % 360.0
    hi = lo + (a1 - a0)
    return lo <= ang <= hi or lo <= ang + 360.0 <= hi


@pytest.mark.parametrize("index", range(4))
def test_text_mask_matches_second_rasterization(index):
    sample = render_sample(SynthConfig(size=32, char_height=(8, 14)), index)
    h, w = sample.masks.text_mask.shape
    expected = np.zeros((h, w), bool)
    for g in sample.glyphs:
        for st_ in g.strokes:
            for y in range(h):
                for x in range(w):
                    expected[y, x] |= _scalar_coverage(st_, y, x)
    assert sample.glyphs
    np.testing.assert_array_equal(sample.masks.text_mask, expected)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_text_mask_inside_area_mask(index):
    _, m = synth_sample(SynthConfig(), index)
    assert not (m.text_mask & ~m.area_mask).any()


def test_mask_pair_enforces_containment():
    t = np.zeros((4, 4), bool)
    t[1, 1] = True
    with pytest.raises(ValueError):
        MaskPair(t, np.zeros((4, 4), bool))


def test_samples_include_thin_strokes():
    widths = {st_.width for i in range(40) for g in render_sample(SynthConfig(), i).glyphs for st_ in g.strokes}
    assert {1.0, 2.0} & widths
    assert max(widths) >= 3.0


def test_synth_config_validation():
    with pytest.raises(ConfigError):
        SynthConfig(stroke_width=(0, 2)).validate()
    with pytest.raises(ConfigError):
        SynthConfig(background_modes=("plasma",)).validate()


def test_dataset_round_trip(tmp_path):
    cfg = SynthConfig(seed=5)
    write_dataset(cfg, tmp_path, 3, start=2)
    assert read_manifest(tmp_path)[0][:2] == (2, 5)
    assert sorted(p.name for p in (tmp_path / "images").iterdir()) == ["000002.png", "000003.png", "000004.png"]
    ds = load_dataset(tmp_path)
    ref = generate(cfg, 3, start=2)
    np.testing.assert_array_equal(ds.images, ref.images)
    np.testing.assert_array_equal(ds.text_masks, ref.text_masks)
    np.testing.assert_array_equal(ds.area_masks, ref.area_masks)


def test_manifest_format(tmp_path):
    write_dataset(SynthConfig(), tmp_path, 2)
    lines = (tmp_path / "manifest.txt").read_text().splitlines()
    assert len(lines) == 2
    idx, seed, count = map(int, lines[1].split())
    assert (idx, seed) == (1, 0)
    assert count == len(render_sample(SynthConfig(), 1).glyphs)


def test_missing_dataset_is_io_error(tmp_path):
    with pytest.raises(IOError):
        load_dataset(tmp_path / "nope")


# -- fgIoU / F-score -----------------------------------------------------------------


def test_iou_hand_case():
    pred = np.array([[1, 1], [0, 0]])
    gt = np.array([[0, 1], [0, 1]])
    assert fg_iou(pred, gt) == pytest.approx(100 / 3)
    assert round(fg_iou(pred, gt), 2) == 33.33
    assert f_score(pred, gt) == (0.5, 0.5, 0.5)


def test_iou_trivial_cases():
    m = np.eye(4, dtype=bool)
    assert fg_iou(m, m) == 100.0
    assert fg_iou(m, np.fliplr(m) & ~m) == 0.0
    z = np.zeros((3, 3), bool)
    assert fg_iou(z, z) == 100.0
    assert f_score(z, z) == (1.0, 1.0, 1.0)


def test_f_score_superset_double_area():
    gt = np.zeros((4, 4), bool)
    gt[:2, :2] = True
    pred = np.zeros((4, 4), bool)
    pred[:2, :] = True
    p, r, f = f_score(pred, gt)
    assert (p, r) == (0.5, 1.0)
    assert f == pytest.approx(2 / 3)


def test_empty_prediction_gives_zero_f():
    gt = np.zeros((4, 4), bool)
    gt[1, 1] = True
    assert f_score(np.zeros_like(gt), gt)[2] == 0.0
    assert fg_iou(np.zeros_like(gt), gt) == 0.0


def test_shape_mismatch_and_non_binary():
    with pytest.raises(ValueError):
        fg_iou(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        fg_iou(np.full((2, 2), 0.5), np.zeros((2, 2)))


def brute_counts(pred, gt):
    tp = fp = fn = 0
    for p, g in zip(np.ravel(pred), np.ravel(gt)):
        tp += bool(p and g)
        fp += bool(p and not g)
        fn += bool(g and not p)
    return tp, fp, fn


@pytest.mark.parametrize("seed", range(5))
def test_metrics_match_brute_force(seed):
    r = np.random.default_rng(seed)
    pred, gt = r.random((2, 12, 12)) > r.uniform(0.2, 0.9, 2)[:, None, None]
    tp, fp, fn = brute_counts(pred, gt)
    c = Counts().update(pred, gt)
    assert (c.tp, c.fp, c.fn) == (tp, fp, fn)
    assert c.iou == 100 * tp / (tp + fp + fn)
    p, rr = tp / (tp + fp), tp / (tp + fn)
    assert c.f_score == pytest.approx(2 * p * rr / (p + rr), abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 1_000_000))
def test_iou_f_identity(seed):
    r = np.random.default_rng(seed)
    c = Counts()
    for _ in range(3):
        c.update(r.random((8, 8)) > 0.5, r.random((8, 8)) > 0.5)
    p, rr = c.precision, c.recall
    if p + rr - p * rr > 0:
        assert c.iou / 100 == pytest.approx(p * rr / (p + rr - p * rr), abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1_000_000))
def test_metrics_permutation_invariant(seed):
    r = np.random.default_rng(seed)
    pred, gt = r.random((2, 10, 10)) > 0.5
    perm = r.permutation(100)
    a = f_score(pred, gt)
    b = f_score(pred.ravel()[perm], gt.ravel()[perm])
    assert a == b


def test_global_accumulation_is_not_per_image_mean():
    gt1 = np.ones((2, 2), bool)
    gt2 = np.zeros((4, 4), bool)
    gt2[0, 0] = True
    ev = Evaluator(band_radius=1)
    ev.update(gt1, gt1)                    # perfect on a 4-pixel object
    ev.update(np.zeros_like(gt2), gt2)     # misses a 1-pixel object
    assert ev.report().fgIoU == pytest.approx(80.0)


def test_counts_merge_is_associative():
    r = np.random.default_rng(0)
    parts = [Counts().update(*(r.random((2, 6, 6)) > 0.5)) for _ in range(3)]
    assert parts[0].merge(parts[1]).merge(parts[2]) == parts[0].merge(parts[1].merge(parts[2]))


# -- edge band ----------------------------------------------------------------------


def _brute_band(gt, radius):
    h, w = gt.shape
    bnd = []
    for y in range(h):
        for x in range(w):
            if gt[y, x]:
                nb = [gt[y + dy, x + dx] for dy in (-1, 0, 1) for dx in (-1, 0, 1)
                      if 0 <= y + dy < h and 0 <= x + dx < w]
                if not all(nb):
                    bnd.append((y, x))
    band = np.zeros_like(gt, bool)
    for y in range(h):
        for x in range(w):
            band[y, x] = any(max(abs(y - by), abs(x - bx)) <= radius for by, bx in bnd)
    return np.array(bnd), band


def test_square_band_radius_one():
    gt = np.zeros((16, 16), bool)
    gt[4:12, 4:12] = True
    bnd_pts, band = _brute_band(gt, 1)
    assert len(bnd_pts) == 28 and boundary(gt).sum() == 28
    np.testing.assert_array_equal(edge_band(gt, 1), band)
    assert band.sum() == 36 + 28 + 20
    pred = np.zeros_like(gt)
    pred[4:12, 5:13] = True
    rep = edge_band_metrics(pred, gt, 1)
    sel = band
    tp, fp, fn = brute_counts(pred[sel], gt[sel])
    assert rep.edge_fgIoU == pytest.approx(100 * tp / (tp + fp + fn))
    assert rep.band_pixels == 84 and not rep.band_empty


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 100_000), st.integers(1, 3))
def test_band_matches_brute_force(seed, radius):
    gt = np.random.default_rng(seed).random((10, 10)) > 0.6
    np.testing.assert_array_equal(edge_band(gt, radius), _brute_band(gt, radius)[1])


def test_empty_band_flagged():
    rep = edge_band_metrics(np.zeros((8, 8), bool), np.zeros((8, 8), bool), 2)
    assert rep.band_empty and rep.edge_fgIoU is None
    assert "band_empty=true" in rep.to_text()
    assert json.loads(rep.to_json())["band_empty"] is True


def test_large_band_equals_global():
    r = np.random.default_rng(1)
    pred, gt = r.random((2, 16, 16)) > 0.5
    rep = edge_band_metrics(pred, gt, 32)
    assert rep.edge_fgIoU == pytest.approx(rep.fgIoU)
    assert rep.edge_f_score == pytest.approx(rep.f_score)


def test_band_radius_validation_and_default():
    with pytest.raises(ValueError):
        edge_band(np.ones((4, 4), bool), 0)
    assert default_band_radius(64) == 2
    assert default_band_radius(128) == 4


def test_report_formats():
    r = np.random.default_rng(2)
    pred, gt = r.random((2, 16, 16)) > 0.5
    rep = edge_band_metrics(pred, gt, 2)
    text = rep.to_text()
    assert text.startswith("# accumulation=global fgIoU=percent f_score=decimal")
    kv = dict(line.split("=", 1) for line in text.splitlines()[1:])
    assert float(kv["fgIoU"]) == pytest.approx(rep.fgIoU, abs=1e-6)
    js = json.loads(rep.to_json())
    assert js["accumulation"] == "global" and js["f_score"] == rep.f_score


# -- k-means -------------------------------------------------------------------------


def test_distinct_values_give_zero_inertia():
    vals = np.array([[0.0, 0.0], [5.0, 1.0], [-3.0, 4.0]])
    feats = vals[np.random.default_rng(0).integers(0, 3, 36)].T.reshape(2, 6, 6)
    res = kmeans_features(feats, 3)
    assert res.inertia[-1] == 0.0
    for j in range(3):
        assert len({tuple(v) for v in feats.reshape(2, -1).T[res.labels.ravel() == j]}) == 1


def test_two_blobs():
    r = np.random.default_rng(1)
    a = r.normal(0, 0.3, (40, 3))
    b = r.normal(6, 0.3, (40, 3))
    x = np.concatenate([a, b])
    labels, centers, history, _ = kmeans(x, 2)
    assert len(set(labels[:40])) == 1 and len(set(labels[40:])) == 1 and labels[0] != labels[40]
    d = ((x[:, None] - centers[None]) ** 2).sum(-1)
    np.testing.assert_array_equal(labels, d.argmin(1))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 100_000), st.integers(2, 5))
def test_inertia_non_increasing(seed, k):
    x = np.random.default_rng(seed).standard_normal((50, 4))
    _, _, history, it = kmeans(x, k, seed=seed)
    assert all(b <= a + 1e-9 for a, b in zip(history, history[1:]))
    assert it <= 100


def test_kmeans_errors_and_default():
    with pytest.raises(ValueError):
        kmeans_features(np.zeros((2, 2, 2)), 5)
    with pytest.raises(ValueError):
        kmeans(np.zeros((4, 2)), 1)
    assert DEFAULT_K == 3


def test_kmeans_deterministic():
    f = np.random.default_rng(3).standard_normal((4, 8, 8))
    np.testing.assert_array_equal(kmeans_features(f, 3, seed=1).labels, kmeans_features(f, 3, seed=1).labels)
