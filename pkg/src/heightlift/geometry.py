"""Coordinate frames and the height-based pixel-to-ground projection.

Frame conventions, fixed once for the whole package:

* camera: x right, y down, z forward (optical axis);
* virtual: camera-centered, rotated minimally so +y points straight at the
  ground (the ground plane is y = H);
* ego: x forward along the road, y left, z up, ground at z = 0, origin
  directly below the camera.

A pixel (u, v) with an estimated height h above the ground maps to 3D by
applying the inverse intrinsics onto the depth-1 reference plane, rotating
into the virtual frame, scaling the ray by (H - h) / y_ref so it lands h
meters above the ground, and finally moving into the ego frame.

Scalar operations here spell out the component arithmetic explicitly; the
vectorized paths in :mod:`heightlift.frustum` mirror the same expression
order so both produce bit-identical coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import BehindCameraError, ContractError, HeightAboveCameraError, HorizonError

_ORTHO_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class CameraIntrinsics:
    """Pinhole intrinsics with zero skew."""

    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ContractError(f"focal lengths must be positive: fx={self.fx}, fy={self.fy}")

    def matrix(self):
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Rotation (orthonormal, det +1) plus translation, in meters."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        if r.shape != (3, 3):
            raise ContractError(f"rotation must be 3x3, got {r.shape}")
        if not np.allclose(r @ r.T, np.eye(3), atol=_ORTHO_TOL):
            raise ContractError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ContractError(f"rotation determinant {np.linalg.det(r)} != +1")

    @staticmethod
    def identity():
        return RigidTransform(np.eye(3), np.zeros(3))

    def apply(self, p):
        """Apply to a single 3-point with explicit component arithmetic."""
        r, t = self.rotation, self.translation
        x, y, z = float(p[0]), float(p[1]), float(p[2])
        return np.array([
            r[0, 0] * x + r[0, 1] * y + r[0, 2] * z + t[0],
            r[1, 0] * x + r[1, 1] * y + r[1, 2] * z + t[1],
            r[2, 0] * x + r[2, 1] * y + r[2, 2] * z + t[2],
        ])

    def apply_batch(self, pts):
        """Apply to an (..., 3) array, mirroring apply()'s operation order."""
        pts = np.asarray(pts, dtype=np.float64)
        r, t = self.rotation, self.translation
        x, y, z = pts[..., 0], pts[..., 1], pts[..., 2]
        return np.stack([
            r[0, 0] * x + r[0, 1] * y + r[0, 2] * z + t[0],
            r[1, 0] * x + r[1, 1] * y + r[1, 2] * z + t[1],
            r[2, 0] * x + r[2, 1] * y + r[2, 2] * z + t[2],
        ], axis=-1)

    def inverse(self):
        rt = self.rotation.T
        return RigidTransform(rt, -(rt @ self.translation))

    def compose(self, inner):
        """Transform equal to applying ``inner`` first, then ``self``."""
        return RigidTransform(self.rotation @ inner.rotation,
                              self.rotation @ inner.translation + self.translation)


@dataclass(frozen=True, eq=False)
class GroundPlane:
    """Road plane a*x + b*y + c*z + d = 0 in camera coordinates.

    Stored canonically: (a, b, c) unit length and pointing from the ground
    toward the camera, which puts the camera on the positive side (d > 0).
    """

    a: float
    b: float
    c: float
    d: float

    def __post_init__(self):
        n = math.sqrt(self.a * self.a + self.b * self.b + self.c * self.c)
        if abs(n - 1.0) > _ORTHO_TOL:
            raise ContractError(f"plane normal norm {n} != 1; use from_coefficients()")
        if self.d <= 0.0:
            raise ContractError("camera sits on or below the plane (d <= 0); "
                                "use from_coefficients() to canonicalize")

    @staticmethod
    def from_coefficients(a, b, c, d):
        """Normalize and orient arbitrary plane coefficients canonically."""
        n = math.sqrt(a * a + b * b + c * c)
        if n == 0.0:
            raise ContractError("plane normal is zero")
        a, b, c, d = a / n, b / n, c / n, d / n
        if d == 0.0:
            raise ContractError("camera lies on the ground plane (d = 0)")
        if d < 0.0:
            a, b, c, d = -a, -b, -c, -d
        return GroundPlane(a, b, c, d)

    def normal(self):
        return np.array([self.a, self.b, self.c])


@dataclass(frozen=True, eq=False)
class VirtualCameraFrame:
    """Everything needed to move between pixels, virtual frame, and ego frame."""

    intrinsics: CameraIntrinsics
    cam_to_virtual: RigidTransform
    virtual_to_ego: RigidTransform
    camera_height: float

    def __post_init__(self):
        if self.camera_height <= 0:
            raise ContractError(f"camera height must be positive, got {self.camera_height}")


class PixelHeightSample(NamedTuple):
    """A pixel paired with an estimated height above ground, in meters."""

    u: float
    v: float
    h: float


def rotation_about_axis(axis, angle):
    """Rodrigues rotation about a unit axis."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    k = np.array([[0.0, -axis[2], axis[1]],
                  [axis[2], 0.0, -axis[0]],
                  [-axis[1], axis[0], 0.0]])
    return np.eye(3) + math.sin(angle) * k + (1.0 - math.cos(angle)) * (k @ k)


def minimal_rotation_between(src, dst):
    """Smallest rotation taking unit vector ``src`` onto unit vector ``dst``.

    Antiparallel inputs fall back to a half turn about the camera x-axis.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    dot = float(np.clip(src @ dst, -1.0, 1.0))
    axis = np.cross(src, dst)
    norm = np.linalg.norm(axis)
    if norm < 1e-12:
        if dot > 0.0:
            return np.eye(3)
        return rotation_about_axis(np.array([1.0, 0.0, 0.0]), math.pi)
    return rotation_about_axis(axis / norm, math.atan2(norm, dot))


def pixel_to_cam_ref(sample, intrinsics):
    """Undo the intrinsics onto the depth-1 reference plane; h rides along."""
    x = (sample.u - intrinsics.cx) / intrinsics.fx
    y = (sample.v - intrinsics.cy) / intrinsics.fy
    return np.array([x, y, 1.0]), sample.h


def virtual_from_ground_plane(plane, intrinsics):
    """Build the virtual frame implied by the road plane.

    The virtual origin coincides with the camera center, so the camera height
    is the point-plane distance d. The rotation is the minimal one taking the
    downward ground normal onto the virtual +y axis; ego placement stays an
    identity placeholder until the caller picks an ego frame.
    """
    down = -plane.normal()  # from the camera toward the ground
    rotation = minimal_rotation_between(down, np.array([0.0, 1.0, 0.0]))
    return VirtualCameraFrame(
        intrinsics=intrinsics,
        cam_to_virtual=RigidTransform(rotation, np.zeros(3)),
        virtual_to_ego=RigidTransform.identity(),
        camera_height=plane.d,
    )


def canonical_virtual_to_ego(camera_height):
    """Road-aligned ego frame: x = virtual z, y = -virtual x, z = H - virtual y."""
    rotation = np.array([[0.0, 0.0, 1.0],
                         [-1.0, 0.0, 0.0],
                         [0.0, -1.0, 0.0]])
    return RigidTransform(rotation, np.array([0.0, 0.0, camera_height]))


def frame_from_plane(plane, intrinsics):
    """Virtual frame with the canonical road-aligned ego transform attached."""
    frame = virtual_from_ground_plane(plane, intrinsics)
    return VirtualCameraFrame(
        intrinsics=frame.intrinsics,
        cam_to_virtual=frame.cam_to_virtual,
        virtual_to_ego=canonical_virtual_to_ego(frame.camera_height),
        camera_height=frame.camera_height,
    )


def cam_to_virtual(p_cam, h, frame):
    """Rigidly move a camera-frame point into the virtual frame; h rides along."""
    return frame.cam_to_virtual.apply(p_cam), h


def ground_intersect(p_ref_virt, h, frame):
    """Scale a reference-plane ray so it sits h meters above the ground.

    The y component is set to H - h directly rather than via the scale
    product, so the height identity holds exactly in floating point.
    Heights may be negative (a band below the road surface is part of the
    height discretization); heights at or above the camera never intersect.
    """
    big_h = frame.camera_height
    y_ref = float(p_ref_virt[1])
    if h >= big_h:
        raise HeightAboveCameraError(f"height {h} >= camera height {big_h}")
    if y_ref <= 1e-9:
        raise HorizonError(f"ray with y_ref={y_ref} never reaches the ground")
    scale = (big_h - h) / y_ref
    return np.array([scale * float(p_ref_virt[0]),
                     big_h - h,
                     scale * float(p_ref_virt[2])])


def virtual_to_ego(p_virt, frame):
    return frame.virtual_to_ego.apply(p_virt)


def lift_pixel(sample, frame):
    """Full pixel+height to ego-frame composition."""
    p_ref, h = pixel_to_cam_ref(sample, frame.intrinsics)
    p_virt, h = cam_to_virtual(p_ref, h, frame)
    p_ground = ground_intersect(p_virt, h, frame)
    return virtual_to_ego(p_ground, frame)


def ego_from_cam_transform(frame):
    """Composite camera-to-ego rigid transform."""
    return frame.virtual_to_ego.compose(frame.cam_to_virtual)


def project_ego_to_pixel(p_ego, frame):
    """Inverse of lift_pixel: ego point -> (u, v, h) sample.

    The height is the ego z-coordinate; the pixel comes from perspective
    projection through the intrinsics after moving back into the camera frame.
    """
    p_ego = np.asarray(p_ego, dtype=np.float64)
    cam_from_ego = ego_from_cam_transform(frame).inverse()
    p_cam = cam_from_ego.apply(p_ego)
    z = float(p_cam[2])
    if z <= 0.0:
        raise BehindCameraError(f"point depth {z} is not positive")
    k = frame.intrinsics
    u = k.fx * float(p_cam[0]) / z + k.cx
    v = k.fy * float(p_cam[1]) / z + k.cy
    return PixelHeightSample(u=u, v=v, h=float(p_ego[2]))
