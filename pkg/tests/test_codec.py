import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from centerscale.codec import (CodecError, DetBox, EncoderConfig, GtBox, decode, encode,
                               gaussian_for, iou, nms, perfect_predictions)
from centerscale.harness import SceneConfig, generate_scene


def brute_iou(a, b):
    """Area arithmetic on corner coordinates."""
    ax2, ay2, bx2, by2 = a.x + a.w, a.y + a.h, b.x + b.w, b.y + b.h
    iw = max(0.0, min(ax2, bx2) - max(a.x, b.x))
    ih = max(0.0, min(ay2, by2) - max(a.y, b.y))
    inter = iw * ih
    return inter / (a.w * a.h + b.w * b.h - inter)


def reference_nms(boxes, thr):
    """Exhaustive reference: keep a box iff no kept box ranked above it overlaps it."""
    ranked = sorted(enumerate(boxes), key=lambda p: (-p[1].score, p[0]))
    kept = []
    for _, b in ranked:
        if all(brute_iou(k, b) < thr for k in kept):
            kept.append(b)
    return kept


def random_boxes(rng, n):
    out = []
    for _ in range(n):
        w, h = rng.uniform(5, 60, 2)
        out.append(DetBox(float(rng.uniform(0, 100)), float(rng.uniform(0, 100)),
                          float(w), float(h), float(rng.choice([0.3, 0.5, 0.9, rng.random()]))))
    return out


class TestEncode:
    def test_empty(self):
        t = encode([], 64, 64)
        assert not t.center.any() and not t.gauss_mask.any() and not t.pos_mask.any()

    def test_single_gt(self):
        gt = GtBox(200 - 20.5, 300 - 50, 41, 100)
        t = encode([gt], 512, 512)
        assert t.pos_mask.sum() == 1
        assert t.center[75, 50] == 1.0
        assert t.scale[75, 50] == pytest.approx(3.2188758, abs=1e-7)
        assert t.scale[75, 50] == pytest.approx(math.log(25.0), abs=1e-15)
        assert t.offset_x[75, 50] == 0.0 and t.offset_y[75, 50] == 0.0

    def test_fractional_offsets(self):
        gt = GtBox(10.0, 20.0, 8.2, 20.0)   # center (14.1, 30.0)
        t = encode([gt], 64, 64)
        assert t.center[7, 3] == 1.0
        assert t.offset_x[7, 3] == pytest.approx(14.1 / 4 - 3, abs=1e-12)
        assert t.offset_y[7, 3] == pytest.approx(0.5, abs=1e-12)

    def test_overlapping_gaussians_take_max(self):
        a = GtBox(40, 40, 41, 100)
        b = GtBox(60, 50, 45, 110)
        t = encode([a, b], 256, 256)
        ga = gaussian_for(a, 256, 256)
        gb = gaussian_for(b, 256, 256)
        assert (ga > 0).sum() and ((ga > 0) & (gb > 0)).sum() > 0
        np.testing.assert_array_equal(t.gauss_mask, np.maximum(ga, gb))

    def test_gaussian_shape(self):
        gt = GtBox(100, 100, 41, 100)
        g = gaussian_for(gt, 256, 256)
        cx, cy = gt.center
        col, row = int(cx // 4), int(cy // 4)
        sig_h = 25 / 4
        assert g[row, col] == 1.0
        assert g[row + 3, col] == pytest.approx(math.exp(-9 / (2 * sig_h ** 2)), rel=1e-12)

    def test_ignore_contributes_nothing(self):
        t = encode([GtBox(10, 10, 20, 50, ignore=True)], 128, 128)
        assert not t.gauss_mask.any() and not t.pos_mask.any()

    def test_invariants_on_scenes(self):
        for seed in range(10):
            scene = generate_scene(SceneConfig(), seed)
            t = scene.targets
            assert np.all(t.gauss_mask >= t.center)
            assert np.all(t.gauss_mask[t.pos_mask] == 1.0)
            assert set(np.unique(t.center)) <= {0.0, 1.0}
            assert np.all((t.offset_x >= 0) & (t.offset_x < 1))
            assert np.all((t.offset_y >= 0) & (t.offset_y < 1))
            assert np.all(t.scale[~t.pos_mask] == 0)

    def test_stride_mismatch(self):
        with pytest.raises(CodecError, match="shape/stride mismatch"):
            encode([], 30, 64)

    def test_boundary_center_goes_to_floor_cell(self):
        gt = GtBox(0, 0, 8, 16)    # center (4, 8) sits on a cell corner
        t = encode([gt], 32, 32)
        assert t.center[2, 1] == 1.0
        assert t.offset_x[2, 1] == 0.0 and t.offset_y[2, 1] == 0.0


class TestIou:
    def test_cases(self):
        a = DetBox(0, 0, 2, 2, 1)
        assert iou(a, a) == 1.0
        assert iou(a, DetBox(5, 5, 1, 1, 1)) == 0.0
        assert iou(a, DetBox(1, 0, 2, 2, 1)) == pytest.approx(2 / 6, abs=1e-15)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(0.1, 50), min_size=8, max_size=8))
    def test_matches_brute_force(self, v):
        a = DetBox(v[0], v[1], v[2], v[3], 1)
        b = DetBox(v[4], v[5], v[6], v[7], 1)
        assert iou(a, b) == pytest.approx(brute_iou(a, b), abs=1e-12)
        assert 0.0 <= iou(a, b) <= 1.0


class TestNms:
    def test_duplicate(self):
        out = nms([DetBox(0, 0, 10, 10, 0.8), DetBox(0, 0, 10, 10, 0.9)], 0.5)
        assert len(out) == 1 and out[0].score == 0.9

    def test_disjoint_all_survive(self):
        boxes = [DetBox(20 * i, 0, 10, 10, 0.1 * i + 0.05) for i in range(6)]
        out = nms(boxes, 0.5)
        assert len(out) == 6
        assert [b.score for b in out] == sorted((b.score for b in boxes), reverse=True)

    def test_ties_keep_input_order(self):
        a, b = DetBox(0, 0, 10, 10, 0.5), DetBox(1, 0, 10, 10, 0.5)
        assert nms([a, b], 0.5) == [a]
        assert nms([b, a], 0.5) == [b]

    def test_random_sets_match_reference(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            boxes = random_boxes(rng, int(rng.integers(0, 25)))
            thr = float(rng.uniform(0.2, 0.8))
            assert nms(boxes, thr) == reference_nms(boxes, thr)

    def test_idempotent(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            boxes = random_boxes(rng, 20)
            once = nms(boxes, 0.5)
            assert nms(once, 0.5) == once


class TestDecode:
    def test_below_threshold(self):
        z = np.zeros((8, 8))
        assert decode(np.full((8, 8), 0.005), z, z, z) == []

    def test_single_roundtrip(self):
        gt = GtBox(123.3, 57.9, 33.0, 80.5)
        t = encode([gt], 256, 256)
        (box,) = decode(*perfect_predictions(t), r=gt.w / gt.h)
        cx, cy = gt.center
        bx, by = box.center
        assert abs(bx - cx) < 1e-9 and abs(by - cy) < 1e-9
        assert box.h == pytest.approx(gt.h, rel=1e-12)
        assert box.w == pytest.approx(gt.w, rel=1e-12)

    def test_width_is_ratio_times_height(self):
        rng = np.random.default_rng(3)
        shape = (16, 16)
        center = rng.uniform(0, 1, shape)
        scale = rng.uniform(1, 4, shape)
        for r in (0.41, 0.40, 0.36, 0.2):
            for b in decode(center, scale, rng.random(shape), rng.random(shape), r=r, apply_nms=False):
                assert b.w == r * b.h

    def test_nonfinite_scale_skipped(self):
        center = np.full((2, 2), 0.9)
        scale = np.array([[1.0, np.nan], [np.inf, 2.0]])
        diag = Counter()
        out = decode(center, scale, np.zeros((2, 2)), np.zeros((2, 2)), apply_nms=False,
                     diagnostics=diag)
        assert len(out) == 2
        assert diag["nonfinite_scale"] == 2

    def test_sorted_by_score(self):
        rng = np.random.default_rng(5)
        out = decode(rng.random((10, 10)), np.full((10, 10), 1.0), np.zeros((10, 10)),
                     np.zeros((10, 10)))
        scores = [b.score for b in out]
        assert scores == sorted(scores, reverse=True)

    def test_crowd_survivors_grow_as_width_shrinks(self):
        cfg = SceneConfig(crowd=True, min_count=6, max_count=12)
        enc = EncoderConfig()
        for seed in range(50):
            scene = generate_scene(cfg, seed)
            preds = perfect_predictions(scene.targets)
            pre = [len(decode(*preds, cfg=enc, r=r, apply_nms=False)) for r in (0.41, 0.36)]
            assert pre[0] == pre[1] == len(scene.gts)
            counts = []
            for r in (0.41, 0.36):
                dets = decode(*preds, cfg=enc, r=r, apply_nms=False)
                counts.append(len(reference_nms(dets, enc.nms_iou)))
                assert len(decode(*preds, cfg=enc, r=r)) == counts[-1]
            assert counts[1] >= counts[0]


def test_roundtrip_property_on_separable_scenes():
    cfg = SceneConfig()
    for seed in range(40):
        scene = generate_scene(cfg, seed)
        preds = perfect_predictions(scene.targets)
        for gt in scene.gts:
            dets = decode(*preds, r=gt.w / gt.h, apply_nms=False)
            best = min(dets, key=lambda d: math.dist(d.center, gt.center))
            assert math.dist(best.center, gt.center) < 2.0
            assert best.h == pytest.approx(gt.h, rel=1e-12)
