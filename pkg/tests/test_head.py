import math

import numpy as np
import pytest

from heightlift import autodiff as ad
from heightlift import head as hd
from heightlift.autodiff import Tensor, grad_check
from heightlift.bev import BevFeatureMap, BevGridSpec
from heightlift.boxes import Box3D, Detection
from heightlift.metrics import bev_iou


def tensor(data):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


def grid_spec(cells=8, res=1.0, channels=4):
    return BevGridSpec(x_min=0.0, x_max=cells * res, y_min=0.0, y_max=cells * res,
                       resolution=res, channels=channels)


def random_box(rng, spec, z=None):
    margin = 1.5
    return Box3D(cx=rng.uniform(spec.x_min + margin, spec.x_max - margin),
                 cy=rng.uniform(spec.y_min + margin, spec.y_max - margin),
                 cz=rng.uniform(0.5, 2.0) if z is None else z,
                 length=rng.uniform(0.8, 3.0), width=rng.uniform(0.5, 2.0),
                 height=rng.uniform(0.8, 3.0),
                 yaw=rng.uniform(-math.pi, math.pi * 0.999))


class TestHeadForward:
    def test_zero_weights(self):
        rng = np.random.default_rng(0)
        params = hd.init_head(rng, channels=4, n_classes=3)
        params["head.trunk.weight"].data[:] = 0.0
        spec = grid_spec()
        f_bev = BevFeatureMap(spec=spec, data=tensor(np.zeros((4, 8, 8))))
        out = hd.head_forward(params, f_bev)
        assert np.all(out.heatmap.data == 0.5)
        assert np.all(out.regression.data == 0.0)

    def test_spatial_dims_match_bev(self):
        rng = np.random.default_rng(1)
        params = hd.init_head(rng, channels=3, n_classes=2)
        spec = grid_spec(cells=6, channels=3)
        f_bev = BevFeatureMap(spec=spec, data=tensor(rng.standard_normal((3, 6, 6))))
        out = hd.head_forward(params, f_bev)
        assert out.heatmap.shape == (2, 6, 6)
        assert out.regression.shape == (8, 6, 6)

    def test_gradient(self):
        rng = np.random.default_rng(2)
        params = hd.init_head(rng, channels=3, n_classes=2)
        for name in params:
            params[name].data = rng.standard_normal(params[name].shape) * 0.4
        spec = grid_spec(cells=4, channels=3)
        feat = tensor(rng.standard_normal((3, 4, 4)))
        names = sorted(params)

        def op(f, *tensors):
            p = dict(zip(names, tensors))
            out = hd.head_forward(p, BevFeatureMap(spec=spec, data=f))
            return ad.concat([ad.reshape(out.heatmap, (2, 16)),
                              ad.reshape(out.regression, (8, 16))], axis=0)

        assert grad_check(op, (feat, *(params[n] for n in names))) < 1e-4


class TestEncodeTargets:
    def test_box_at_cell_center(self):
        spec = grid_spec()
        box = Box3D(cx=3.5, cy=2.5, cz=1.0, length=2.0, width=1.0, height=1.5, yaw=0.0)
        t = hd.encode_targets([(box, 0)], spec, n_classes=2)
        assert t.heatmap[0, 2, 3] == 1.0
        assert t.regression[0, 2, 3] == 0.5 and t.regression[1, 2, 3] == 0.5
        assert t.mask[2, 3] and t.n_peaks == 1

    def test_yaw_zero_targets(self):
        spec = grid_spec()
        box = Box3D(cx=3.5, cy=2.5, cz=1.0, length=2.0, width=1.0, height=1.5, yaw=0.0)
        t = hd.encode_targets([(box, 0)], spec, n_classes=1)
        assert t.regression[6, 2, 3] == 0.0  # sin
        assert t.regression[7, 2, 3] == 1.0  # cos

    def test_two_distant_boxes_and_max_combine(self):
        spec = grid_spec(cells=16)
        a = Box3D(cx=3.0, cy=3.0, cz=1.0, length=2.0, width=1.0, height=1.0, yaw=0.0)
        b = Box3D(cx=12.0, cy=12.0, cz=1.0, length=2.0, width=1.0, height=1.0, yaw=0.0)
        t = hd.encode_targets([(a, 0), (b, 0)], spec, n_classes=1)
        peaks = np.argwhere(t.heatmap[0] == 1.0)
        assert len(peaks) == 2
        # close pair: overlapping splats keep the pointwise maximum
        c = Box3D(cx=3.6, cy=3.0, cz=1.0, length=2.0, width=1.0, height=1.0, yaw=0.0)
        t2 = hd.encode_targets([(a, 0), (c, 0)], spec, n_classes=1)
        single = hd.encode_targets([(a, 0)], spec, n_classes=1)
        assert np.all(t2.heatmap >= single.heatmap - 1e-15)

    def test_outside_extent_skipped_with_count(self):
        spec = grid_spec()
        inside = Box3D(cx=3.0, cy=3.0, cz=1.0, length=1.0, width=1.0, height=1.0, yaw=0.0)
        outside = Box3D(cx=40.0, cy=3.0, cz=1.0, length=1.0, width=1.0, height=1.0, yaw=0.0)
        t = hd.encode_targets([(inside, 0), (outside, 0)], spec, n_classes=1)
        assert t.n_peaks == 1 and t.n_skipped == 1


class TestDecodeBoxes:
    def test_decode_of_exact_targets_recovers_boxes(self):
        rng = np.random.default_rng(3)
        spec = grid_spec(cells=16, res=0.8)
        gts = [(random_box(rng, spec), int(rng.integers(0, 2))) for _ in range(5)]
        t = hd.encode_targets(gts, spec, n_classes=2)
        out = hd.HeadOutput(heatmap=Tensor(t.heatmap), regression=Tensor(t.regression))
        dets = hd.decode_boxes(out, spec, ["A", "B"], score_thr=0.99)
        assert len(dets) == len(gts)
        recovered = {(round(d.box.cx, 6), round(d.box.cy, 6)): d for d in dets}
        for box, class_id in gts:
            d = recovered[(round(box.cx, 6), round(box.cy, 6))]
            assert d.class_name == ["A", "B"][class_id]
            assert abs(d.box.cx - box.cx) < 1e-12
            assert abs(d.box.cy - box.cy) < 1e-12
            assert abs(d.box.cz - box.cz) < 1e-12
            assert abs(d.box.length - box.length) < 1e-12
            assert abs(d.box.width - box.width) < 1e-12
            assert abs(d.box.height - box.height) < 1e-12
            assert abs(d.box.yaw - box.yaw) < 1e-12

    def test_sin_cos_to_yaw(self):
        spec = grid_spec()
        heat = np.zeros((1, 8, 8))
        heat[0, 4, 4] = 1.0
        reg = np.zeros((8, 8, 8))
        reg[3:6] = 0.0  # log dims -> 1m
        reg[6, 4, 4], reg[7, 4, 4] = 0.0, 1.0
        out = hd.HeadOutput(heatmap=Tensor(heat), regression=Tensor(reg))
        assert hd.decode_boxes(out, spec, ["A"])[0].box.yaw == 0.0
        reg[6, 4, 4], reg[7, 4, 4] = 1.0, 0.0
        out = hd.HeadOutput(heatmap=Tensor(heat), regression=Tensor(reg))
        assert hd.decode_boxes(out, spec, ["A"])[0].box.yaw == pytest.approx(math.pi / 2)

    def test_all_below_threshold_gives_empty(self):
        spec = grid_spec()
        out = hd.HeadOutput(heatmap=Tensor(np.full((1, 8, 8), 0.05)),
                            regression=Tensor(np.zeros((8, 8, 8))))
        assert hd.decode_boxes(out, spec, ["A"], score_thr=0.1) == []

    def test_yaw_always_in_range(self):
        rng = np.random.default_rng(4)
        spec = grid_spec()
        heat = np.zeros((1, 8, 8))
        reg = np.zeros((8, 8, 8))
        for k in range(20):
            iy, ix = rng.integers(0, 8), rng.integers(0, 8)
            heat[0, iy, ix] = 1.0
            angle = rng.uniform(-10, 10)
            reg[6, iy, ix], reg[7, iy, ix] = math.sin(angle), math.cos(angle)
        out = hd.HeadOutput(heatmap=Tensor(heat), regression=Tensor(reg))
        for d in hd.decode_boxes(out, spec, ["A"], max_dets=64, score_thr=0.5):
            assert -math.pi < d.box.yaw <= math.pi


def brute_force_nms(dets, iou_thr):
    """Reference greedy suppression: explicit pairwise comparisons."""
    result = []
    by_class = {}
    for i, d in enumerate(dets):
        by_class.setdefault(d.class_name, []).append((d, i))
    for cls in sorted(by_class):
        remaining = sorted(by_class[cls], key=lambda t: (-t[0].score, t[1]))
        while remaining:
            best = remaining.pop(0)
            result.append(best[0])
            remaining = [(d, i) for d, i in remaining
                         if bev_iou(best[0].box, d.box) < iou_thr]
    result.sort(key=lambda d: -d.score)
    return result


class TestRotatedNms:
    def test_duplicate_keeps_higher_score(self):
        box = Box3D(cx=2.0, cy=2.0, cz=1.0, length=2.0, width=1.0, height=1.0, yaw=0.3)
        dets = [Detection(box=box, class_name="A", score=0.8),
                Detection(box=box, class_name="A", score=0.9)]
        kept = hd.rotated_nms(dets, 0.2)
        assert len(kept) == 1 and kept[0].score == 0.9

    def test_disjoint_boxes_both_kept(self):
        a = Box3D(cx=2.0, cy=2.0, cz=1.0, length=1.0, width=1.0, height=1.0, yaw=0.0)
        b = Box3D(cx=6.0, cy=6.0, cz=1.0, length=1.0, width=1.0, height=1.0, yaw=0.0)
        dets = [Detection(box=a, class_name="A", score=0.8),
                Detection(box=b, class_name="A", score=0.7)]
        assert len(hd.rotated_nms(dets, 0.2)) == 2

    def test_matches_brute_force_on_random_boxes(self):
        rng = np.random.default_rng(5)
        spec = grid_spec(cells=10)
        dets = [Detection(box=random_box(rng, spec), class_name=rng.choice(["A", "B"]),
                          score=float(rng.uniform(0.1, 1.0))) for _ in range(20)]
        kept = hd.rotated_nms(dets, 0.25)
        expected = brute_force_nms(dets, 0.25)
        assert [(d.score, d.class_name) for d in kept] == \
            [(d.score, d.class_name) for d in expected]

    def test_kept_pairs_below_threshold(self):
        rng = np.random.default_rng(6)
        spec = grid_spec(cells=10)
        dets = [Detection(box=random_box(rng, spec), class_name="A",
                          score=float(rng.uniform(0.1, 1.0))) for _ in range(25)]
        kept = hd.rotated_nms(dets, 0.3)
        for i, a in enumerate(kept):
            for b in kept[i + 1:]:
                assert bev_iou(a.box, b.box) < 0.3

    def test_threshold_contract(self):
        with pytest.raises(ValueError):
            hd.rotated_nms([], 1.5)


class TestDetectionLoss:
    def _perfect_setup(self, rng):
        spec = grid_spec(cells=8, res=1.0)
        gts = [(random_box(rng, spec), 0)]
        t = hd.encode_targets(gts, spec, n_classes=1)
        heat = np.clip(t.heatmap, 1e-4, 1.0 - 1e-4)
        out = hd.HeadOutput(heatmap=Tensor(heat), regression=Tensor(t.regression))
        return out, t

    def test_perfect_prediction_near_zero(self):
        out, t = self._perfect_setup(np.random.default_rng(7))
        assert hd.detection_loss(out, t).item() < 1e-2

    def test_loss_nonnegative(self):
        rng = np.random.default_rng(8)
        spec = grid_spec(cells=6)
        t = hd.encode_targets([(random_box(rng, spec), 0)], spec, n_classes=2)
        for _ in range(10):
            out = hd.HeadOutput(heatmap=Tensor(rng.uniform(0.01, 0.99, (2, 6, 6))),
                                regression=Tensor(rng.standard_normal((8, 6, 6))))
            assert hd.detection_loss(out, t).item() >= 0.0

    def test_no_supervised_cells_heatmap_only(self):
        spec = grid_spec(cells=6)
        t = hd.encode_targets([], spec, n_classes=1)
        out = hd.HeadOutput(heatmap=Tensor(np.full((1, 6, 6), 0.4)),
                            regression=Tensor(np.ones((8, 6, 6))))
        loss = hd.detection_loss(out, t)
        assert loss.item() > 0.0  # background focal term only

    def test_gradient(self):
        rng = np.random.default_rng(9)
        spec = grid_spec(cells=4)
        t = hd.encode_targets([(random_box(rng, spec), 0)], spec, n_classes=2)
        logits_h = tensor(rng.standard_normal((2, 4, 4)))
        reg = tensor(rng.standard_normal((8, 4, 4)))

        def op(lh, rg):
            out = hd.HeadOutput(heatmap=ad.sigmoid(lh), regression=rg)
            return hd.detection_loss(out, t)

        assert grad_check(op, (logits_h, reg)) < 1e-3
