import math

import numpy as np
import pytest

from heightlift import geometry as geo
from heightlift.errors import (BehindCameraError, ContractError,
                               HeightAboveCameraError, HorizonError)
from heightlift.geometry import (CameraIntrinsics, GroundPlane, PixelHeightSample,
                                 RigidTransform, canonical_virtual_to_ego,
                                 frame_from_plane, lift_pixel, project_ego_to_pixel,
                                 rotation_about_axis, virtual_from_ground_plane)


def pitched_plane(pitch_rad, height):
    """Ground plane of a camera pitched down by `pitch_rad` at `height` m."""
    return GroundPlane.from_coefficients(0.0, -math.cos(pitch_rad),
                                         -math.sin(pitch_rad), height)


def random_frame(rng):
    pitch = math.radians(rng.uniform(5.0, 15.0))
    height = rng.uniform(4.0, 8.0)
    focal = rng.uniform(60.0, 120.0)
    k = CameraIntrinsics(fx=focal, fy=focal * rng.uniform(0.9, 1.1),
                         cx=rng.uniform(40.0, 60.0), cy=rng.uniform(28.0, 36.0))
    return frame_from_plane(pitched_plane(pitch, height), k)


class TestPixelToCamRef:
    def test_identity_intrinsics(self):
        k = CameraIntrinsics(fx=1.0, fy=1.0, cx=0.0, cy=0.0)
        p, h = geo.pixel_to_cam_ref(PixelHeightSample(0.0, 0.0, 2.0), k)
        assert np.array_equal(p, [0.0, 0.0, 1.0]) and h == 2.0

    def test_principal_point_on_axis(self):
        k = CameraIntrinsics(fx=1000.0, fy=1000.0, cx=960.0, cy=540.0)
        p, _ = geo.pixel_to_cam_ref(PixelHeightSample(960.0, 540.0, 0.0), k)
        assert np.array_equal(p, [0.0, 0.0, 1.0])

    def test_against_matrix_inverse_oracle(self):
        k = CameraIntrinsics(fx=1000.0, fy=1000.0, cx=960.0, cy=540.0)
        p, _ = geo.pixel_to_cam_ref(PixelHeightSample(1160.0, 640.0, 1.0), k)
        oracle = np.linalg.inv(k.matrix()) @ np.array([1160.0, 640.0, 1.0])
        assert np.allclose(p, oracle, atol=1e-12)
        assert np.allclose(p, [0.2, 0.1, 1.0], atol=1e-12)


class TestGroundPlane:
    def test_canonicalizes_sign_and_norm(self):
        plane = GroundPlane.from_coefficients(0.0, 2.0, 0.0, -10.0)
        assert (plane.a, plane.b, plane.c, plane.d) == (0.0, -1.0, 0.0, 5.0)

    def test_rejects_camera_on_ground(self):
        with pytest.raises(ContractError):
            GroundPlane.from_coefficients(0.0, 1.0, 0.0, 0.0)

    def test_direct_constructor_validates(self):
        with pytest.raises(ContractError):
            GroundPlane(0.0, 2.0, 0.0, 5.0)


class TestVirtualFromGroundPlane:
    def test_aligned_plane_gives_identity(self):
        frame = virtual_from_ground_plane(
            GroundPlane.from_coefficients(0.0, 1.0, 0.0, -5.0),
            CameraIntrinsics(1.0, 1.0, 0.0, 0.0))
        assert np.allclose(frame.cam_to_virtual.rotation, np.eye(3), atol=1e-12)
        assert frame.camera_height == pytest.approx(5.0)
        assert np.array_equal(frame.virtual_to_ego.rotation, np.eye(3))

    def test_recovers_known_pitch(self):
        pitch = math.radians(10.0)
        plane = pitched_plane(pitch, 6.0)
        frame = virtual_from_ground_plane(plane, CameraIntrinsics(1.0, 1.0, 0.0, 0.0))
        r = frame.cam_to_virtual.rotation
        # R maps the stored (toward-camera) normal onto (0, -1, 0)
        assert np.allclose(r @ plane.normal(), [0.0, -1.0, 0.0], atol=1e-9)
        # and equals the inverse of the pitch perturbation about x
        assert np.allclose(r, rotation_about_axis([1.0, 0.0, 0.0], pitch).T, atol=1e-9)

    def test_height_is_unit_normal_distance(self):
        frame = virtual_from_ground_plane(
            GroundPlane.from_coefficients(0.0, 0.6, 0.8, -4.0),
            CameraIntrinsics(1.0, 1.0, 0.0, 0.0))
        assert frame.camera_height == pytest.approx(4.0, abs=1e-12)

    def test_antiparallel_branch_uses_half_turn(self):
        # downward normal equal to (0, -1, 0): camera upside down
        frame = virtual_from_ground_plane(
            GroundPlane.from_coefficients(0.0, 1.0, 0.0, 5.0),
            CameraIntrinsics(1.0, 1.0, 0.0, 0.0))
        r = frame.cam_to_virtual.rotation
        assert np.allclose(r, rotation_about_axis([1.0, 0.0, 0.0], math.pi), atol=1e-12)
        assert np.allclose(r @ np.array([0.0, -1.0, 0.0]), [0.0, 1.0, 0.0], atol=1e-12)

    def test_transformed_plane_is_y_equals_h(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            n = rng.standard_normal(3)
            n /= np.linalg.norm(n)
            d = rng.uniform(1.0, 9.0)
            plane = GroundPlane.from_coefficients(*n, d)
            frame = virtual_from_ground_plane(plane, CameraIntrinsics(1.0, 1.0, 0.0, 0.0))
            base = -plane.d * plane.normal()  # closest ground point to camera
            for _ in range(5):
                tangent = np.cross(plane.normal(), rng.standard_normal(3))
                p = base + tangent
                y = frame.cam_to_virtual.apply(p)[1]
                assert abs(y - frame.camera_height) < 1e-9


class TestCamToVirtual:
    def test_identity(self):
        frame = virtual_from_ground_plane(
            GroundPlane.from_coefficients(0.0, -1.0, 0.0, 5.0),
            CameraIntrinsics(1.0, 1.0, 0.0, 0.0))
        p, h = geo.cam_to_virtual(np.array([1.0, 2.0, 3.0]), 0.5, frame)
        assert np.array_equal(p, [1.0, 2.0, 3.0]) and h == 0.5

    def test_quarter_turn_about_z(self):
        rot = rotation_about_axis([0.0, 0.0, 1.0], math.pi / 2.0)
        out = RigidTransform(rot, np.zeros(3)).apply([1.0, 0.0, 0.0])
        assert np.allclose(out, [0.0, 1.0, 0.0], atol=1e-12)

    def test_inverse_composition(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            axis = rng.standard_normal(3)
            t = RigidTransform(rotation_about_axis(axis, rng.uniform(-3, 3)),
                               rng.standard_normal(3))
            p = rng.standard_normal(3)
            assert np.allclose(t.inverse().apply(t.apply(p)), p, atol=1e-12)


class TestGroundIntersect:
    def _frame(self, height):
        # aligned plane keeps the camera height exact in floating point
        return frame_from_plane(GroundPlane.from_coefficients(0.0, -1.0, 0.0, height),
                                CameraIntrinsics(1.0, 1.0, 0.0, 0.0))

    def test_similar_triangles_substitution(self):
        out = geo.ground_intersect(np.array([0.3, 0.5, 1.0]), 1.0, self._frame(6.0))
        assert np.allclose(out, [3.0, 5.0, 10.0], atol=1e-12)
        assert out[1] == 5.0  # exactly H - h

    def test_ground_case(self):
        out = geo.ground_intersect(np.array([0.0, 1.0, 1.0]), 0.0, self._frame(5.0))
        assert np.array_equal(out, [0.0, 5.0, 5.0])

    def test_ascending_ray_is_horizon_error(self):
        with pytest.raises(HorizonError):
            geo.ground_intersect(np.array([0.1, -0.2, 1.0]), 0.0, self._frame(5.0))

    def test_height_at_or_above_camera_rejected(self):
        frame = self._frame(5.0)
        with pytest.raises(HeightAboveCameraError):
            geo.ground_intersect(np.array([0.0, 1.0, 1.0]), frame.camera_height, frame)


class TestVirtualToEgo:
    def test_canonical_ground_point(self):
        t = canonical_virtual_to_ego(7.0)
        assert np.allclose(t.apply([0.0, 7.0, 10.0]), [10.0, 0.0, 0.0], atol=1e-12)

    def test_height_becomes_ego_z(self):
        t = canonical_virtual_to_ego(6.0)
        for h in (0.0, 1.3, 4.5):
            out = t.apply([2.0, 6.0 - h, 9.0])
            assert out[2] == pytest.approx(h, abs=1e-12)

    def test_identity_placeholder_passthrough(self):
        frame = virtual_from_ground_plane(
            GroundPlane.from_coefficients(0.0, -1.0, 0.0, 5.0),
            CameraIntrinsics(1.0, 1.0, 0.0, 0.0))
        p = np.array([1.0, 2.0, 3.0])
        assert np.array_equal(geo.virtual_to_ego(p, frame), p)


class TestLiftPixel:
    def test_straight_down_camera_degenerate_geometry(self):
        # optical axis pointing straight at the ground: downward normal (0,0,1)
        plane = GroundPlane.from_coefficients(0.0, 0.0, -1.0, 5.0)
        k = CameraIntrinsics(fx=100.0, fy=100.0, cx=48.0, cy=32.0)
        frame = frame_from_plane(plane, k)
        out = lift_pixel(PixelHeightSample(48.0, 32.0, 0.0), frame)
        assert np.allclose(out, [0.0, 0.0, 0.0], atol=1e-9)

    def test_lifted_z_equals_height(self):
        rng = np.random.default_rng(6)
        frame = random_frame(rng)
        for _ in range(100):
            u = rng.uniform(0, 96)
            v = rng.uniform(40, 64)  # below the horizon for these cameras
            h = rng.uniform(0.0, frame.camera_height * 0.8)
            out = lift_pixel(PixelHeightSample(u, v, h), frame)
            assert abs(out[2] - h) < 1e-9

    def test_round_trip_with_projection(self):
        rng = np.random.default_rng(7)
        for _ in range(25):
            frame = random_frame(rng)
            for _ in range(40):
                s = PixelHeightSample(u=rng.uniform(0, 96), v=rng.uniform(40, 64),
                                      h=rng.uniform(0.0, 3.5))
                try:
                    p = lift_pixel(s, frame)
                except HorizonError:
                    continue
                back = project_ego_to_pixel(p, frame)
                assert abs(back.u - s.u) < 1e-6 and abs(back.v - s.v) < 1e-6
                assert abs(back.h - s.h) < 1e-9


class TestProjectEgoToPixel:
    def test_behind_camera(self):
        frame = random_frame(np.random.default_rng(8))
        with pytest.raises(BehindCameraError):
            project_ego_to_pixel(np.array([-50.0, 0.0, 1.0]), frame)

    def test_pinhole_formula_when_aligned(self):
        k = CameraIntrinsics(fx=100.0, fy=90.0, cx=48.0, cy=32.0)
        frame = frame_from_plane(GroundPlane.from_coefficients(0.0, -1.0, 0.0, 5.0), k)
        # ego (x fwd, y left, z up) -> camera (x right, y down, z fwd)
        p_cam = np.array([0.3, 0.2, 2.0])
        p_ego = np.array([p_cam[2], -p_cam[0], 5.0 - p_cam[1]])
        s = project_ego_to_pixel(p_ego, frame)
        assert s.u == pytest.approx(100.0 * 0.3 / 2.0 + 48.0, abs=1e-9)
        assert s.v == pytest.approx(90.0 * 0.2 / 2.0 + 32.0, abs=1e-9)


def test_rotations_stay_orthonormal():
    rng = np.random.default_rng(9)
    for _ in range(50):
        frame = random_frame(rng)
        for r in (frame.cam_to_virtual.rotation, frame.virtual_to_ego.rotation):
            assert np.allclose(r @ r.T, np.eye(3), atol=1e-9)
            assert abs(np.linalg.det(r) - 1.0) < 1e-9


def test_horizon_monotonicity_down_the_column():
    rng = np.random.default_rng(10)
    for _ in range(10):
        frame = random_frame(rng)
        u = 48.0
        distances = []
        for v in np.linspace(40.0, 63.0, 12):
            p = lift_pixel(PixelHeightSample(u, v, 0.0), frame)
            distances.append(math.hypot(p[0], p[1]))
        assert all(a > b for a, b in zip(distances, distances[1:]))
