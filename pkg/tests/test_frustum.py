import math

import numpy as np
import pytest

from heightlift import frustum
from heightlift.autodiff import Tensor
from heightlift.errors import DegenerateCameraError, DimensionError, HorizonError
from heightlift.geometry import (CameraIntrinsics, GroundPlane, PixelHeightSample,
                                 frame_from_plane, lift_pixel)
from heightlift.heightnet import FeatureMap, HeightBinSpec, HeightPrediction


def tensor(data):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


def make_frame(pitch_deg=10.0, height=6.0, fx=80.0, w=96, h=64):
    plane = GroundPlane.from_coefficients(
        0.0, -math.cos(math.radians(pitch_deg)), -math.sin(math.radians(pitch_deg)),
        height)
    return frame_from_plane(plane, CameraIntrinsics(fx, fx, w / 2.0, h / 2.0))


class TestOuterProductLift:
    def test_uniform_distribution_splits_evenly(self):
        rng = np.random.default_rng(0)
        fused = FeatureMap(data=tensor(rng.standard_normal((3, 2, 2))), stride=4)
        pred = HeightPrediction(logits=tensor(np.zeros((4, 2, 2))),
                                spec=HeightBinSpec(4, 0.0, 4.0))
        lifted = frustum.outer_product_lift(fused, pred)
        assert lifted.data.shape == (4, 3, 2, 2)
        for b in range(4):
            assert np.allclose(lifted.data[b], fused.data.data / 4.0, atol=1e-15)

    def test_sum_over_bins_restores_fused(self):
        rng = np.random.default_rng(1)
        fused = FeatureMap(data=tensor(rng.standard_normal((5, 3, 4))), stride=4)
        pred = HeightPrediction(logits=tensor(rng.standard_normal((6, 3, 4)) * 3),
                                spec=HeightBinSpec(6, 0.0, 4.0))
        lifted = frustum.outer_product_lift(fused, pred)
        assert np.allclose(lifted.data.sum(axis=0), fused.data.data, atol=1e-12)

    def test_spatial_mismatch_rejected(self):
        fused = FeatureMap(data=tensor(np.zeros((2, 3, 3))), stride=4)
        pred = HeightPrediction(logits=tensor(np.zeros((4, 2, 2))),
                                spec=HeightBinSpec(4, 0.0, 4.0))
        with pytest.raises(DimensionError):
            frustum.outer_product_lift(fused, pred)


class TestFrustumToEgo:
    def test_valid_sample_z_equals_bin_center(self):
        spec = HeightBinSpec(8, -0.5, 4.0)
        frame = make_frame()
        coords, valid = frustum.frustum_to_ego(spec, frame, 4, (16, 24))
        centers = spec.centers()
        for b in range(8):
            zs = coords[b, valid[b], 2]
            assert np.all(np.abs(zs - centers[b]) < 1e-9)

    def test_above_horizon_pixels_masked(self):
        spec = HeightBinSpec(4, 0.0, 3.0)
        frame = make_frame(pitch_deg=6.0)
        coords, valid = frustum.frustum_to_ego(spec, frame, 4, (16, 24))
        # the top feature rows look above the horizon for this camera
        assert not valid[0, 0, :].any()
        assert valid[0, -1, :].all()

    def test_bins_at_or_above_camera_height_masked(self):
        spec = HeightBinSpec(4, 0.0, 8.0)  # top bin center 7.0 > H
        frame = make_frame(height=5.0)
        coords, valid = frustum.frustum_to_ego(spec, frame, 4, (16, 24))
        assert not valid[3].any()
        assert valid[0].any()

    def test_matches_scalar_composition_bit_for_bit(self):
        spec = HeightBinSpec(5, -0.5, 3.5)
        frame = make_frame(pitch_deg=12.0, height=7.0)
        hf, wf = 8, 12
        coords, valid = frustum.frustum_to_ego(spec, frame, 4, (hf, wf))
        for b, center in enumerate(spec.centers()):
            for i in range(hf):
                for j in range(wf):
                    sample = PixelHeightSample((j + 0.5) * 4.0, (i + 0.5) * 4.0, center)
                    try:
                        expected = lift_pixel(sample, frame)
                    except HorizonError:
                        assert not valid[b, i, j]
                        continue
                    assert valid[b, i, j]
                    assert np.array_equal(coords[b, i, j], expected)

    def test_degenerate_camera_rejected(self):
        # camera looking straight up: every ray ascends
        plane = GroundPlane.from_coefficients(0.0, 0.0, 1.0, 5.0)
        frame = frame_from_plane(plane, CameraIntrinsics(80.0, 80.0, 48.0, 32.0))
        with pytest.raises(DegenerateCameraError):
            frustum.frustum_to_ego(HeightBinSpec(4, 0.0, 3.0), frame, 4, (16, 24))


class TestBuildPointCloud:
    def _toy(self, mask=None):
        rng = np.random.default_rng(2)
        lifted = tensor(rng.standard_normal((2, 3, 2, 2)))  # bins=2, C=3, 2x2
        coords = rng.standard_normal((2, 2, 2, 3))
        valid = np.ones((2, 2, 2), dtype=bool) if mask is None else mask
        return lifted, coords, valid

    def test_all_valid_order_is_pixel_major_then_bin(self):
        lifted, coords, valid = self._toy()
        cloud = frustum.build_point_cloud(lifted, coords, valid)
        assert len(cloud) == 8
        k = 0
        for i in range(2):
            for j in range(2):
                for b in range(2):
                    assert np.array_equal(cloud.xyz[k], coords[b, i, j])
                    assert np.array_equal(cloud.features.data[k], lifted.data[b, :, i, j])
                    k += 1

    def test_half_masked(self):
        mask = np.zeros((2, 2, 2), dtype=bool)
        mask[0] = True
        lifted, coords, _ = self._toy()
        cloud = frustum.build_point_cloud(lifted, coords, mask)
        assert len(cloud) == 4
        assert {tuple(p) for p in cloud.xyz} == \
            {tuple(coords[0, i, j]) for i in range(2) for j in range(2)}

    def test_feature_mass_conserved(self):
        mask = np.random.default_rng(3).random((2, 2, 2)) > 0.4
        lifted, coords, _ = self._toy()
        cloud = frustum.build_point_cloud(lifted, coords, mask)
        expected = sum(lifted.data[b, :, i, j].sum()
                       for b in range(2) for i in range(2) for j in range(2)
                       if mask[b, i, j])
        assert abs(cloud.features.data.sum() - expected) < 1e-12

    def test_deterministic_order(self):
        lifted, coords, valid = self._toy()
        a = frustum.build_point_cloud(lifted, coords, valid)
        b = frustum.build_point_cloud(lifted, coords, valid)
        assert np.array_equal(a.xyz, b.xyz)
        assert np.array_equal(a.features.data, b.features.data)


def test_emitted_z_values_subset_of_bin_centers():
    spec = HeightBinSpec(6, -0.5, 4.0)
    frame = make_frame()
    rng = np.random.default_rng(4)
    fused = FeatureMap(data=tensor(rng.standard_normal((4, 16, 24))), stride=4)
    pred = HeightPrediction(logits=tensor(rng.standard_normal((6, 16, 24))), spec=spec)
    cloud = frustum.lift_scene_features(fused, pred, frame)
    centers = spec.centers()
    for z in np.unique(cloud.xyz[:, 2]):
        assert np.min(np.abs(centers - z)) < 1e-9
