"""Lift fused image features into an ego-frame feature point cloud.

Each feature pixel spreads its fused feature over the height bins in
proportion to the predicted height distribution, and every (pixel, bin) slot
gets a 3D position from the height-based ground intersection. Pixels whose
rays never descend to the ground (sky) and bins at or above the camera
height are masked out instead of failing; real roadside scenes contain both.

The vectorized coordinate math below mirrors the scalar expressions in
:mod:`heightlift.geometry` operation for operation, so a per-sample scalar
recomputation reproduces these coordinates bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DegenerateCameraError, DimensionError


@dataclass(eq=False)
class FeaturePointCloud:
    """Valid lifted samples: ego positions plus their feature vectors."""

    xyz: np.ndarray    # (N, 3) float64, ego frame
    features: Tensor   # (N, C)

    def __post_init__(self):
        if self.xyz.shape != (self.features.shape[0], 3):
            raise DimensionError(
                f"point cloud: xyz {self.xyz.shape} vs features {self.features.shape}")
        if not np.all(np.isfinite(self.xyz)):
            raise DimensionError("point cloud contains non-finite coordinates")

    def __len__(self):
        return self.xyz.shape[0]


def outer_product_lift(fused, height_pred):
    """Spread each pixel's feature over bins by its height probabilities.

    Output is (n_bins, C, Hf, Wf); summing over bins restores the fused
    feature exactly because the per-pixel probabilities sum to one.
    """
    c, hf, wf = fused.data.shape
    n_bins, hh, ww = height_pred.logits.shape
    if (hh, ww) != (hf, wf):
        raise DimensionError(f"fused {fused.data.shape} vs height logits "
                             f"{height_pred.logits.shape} spatial mismatch")
    probs = height_pred.probabilities()                      # (n_bins, Hf, Wf)
    probs4 = ad.reshape(probs, (n_bins, 1, hf, wf))
    fused4 = ad.reshape(fused.data, (1, c, hf, wf))
    return ad.mul(probs4, fused4)


def frustum_to_ego(bin_spec, frame, feature_stride, dims):
    """Ego coordinates for every (bin, pixel) slot plus a validity mask.

    Pixel centers sit at ((j + 0.5) * stride, (i + 0.5) * stride) in image
    coordinates. Returns (coords, valid) with coords of shape
    (n_bins, Hf, Wf, 3) and valid of shape (n_bins, Hf, Wf); samples above
    the horizon or with bin centers at/above the camera height are invalid.
    """
    hf, wf = dims
    k = frame.intrinsics
    centers = bin_spec.centers()
    big_h = frame.camera_height

    ii, jj = np.meshgrid(np.arange(hf), np.arange(wf), indexing="ij")
    u = (jj + 0.5) * float(feature_stride)
    v = (ii + 0.5) * float(feature_stride)
    # mirror pixel_to_cam_ref / apply(): same expressions, same order
    x = (u - k.cx) / k.fx
    y = (v - k.cy) / k.fy
    z = np.ones_like(x)
    r = frame.cam_to_virtual.rotation
    t = frame.cam_to_virtual.translation
    xv = r[0, 0] * x + r[0, 1] * y + r[0, 2] * z + t[0]
    yv = r[1, 0] * x + r[1, 1] * y + r[1, 2] * z + t[1]
    zv = r[2, 0] * x + r[2, 1] * y + r[2, 2] * z + t[2]

    descending = yv > 1e-9
    bin_ok = centers < big_h
    valid = bin_ok[:, None, None] & descending[None, :, :]
    if not valid.any():
        raise DegenerateCameraError("no (pixel, bin) sample reaches the ground")

    safe_yv = np.where(descending, yv, 1.0)
    scale = (big_h - centers)[:, None, None] / safe_yv[None, :, :]
    gx = scale * xv[None, :, :]
    gy = np.broadcast_to((big_h - centers)[:, None, None], scale.shape).copy()
    gz = scale * zv[None, :, :]
    re = frame.virtual_to_ego.rotation
    te = frame.virtual_to_ego.translation
    ex = re[0, 0] * gx + re[0, 1] * gy + re[0, 2] * gz + te[0]
    ey = re[1, 0] * gx + re[1, 1] * gy + re[1, 2] * gz + te[1]
    ez = re[2, 0] * gx + re[2, 1] * gy + re[2, 2] * gz + te[2]
    coords = np.stack([ex, ey, ez], axis=-1)
    coords[~valid] = 0.0
    return coords, valid


def build_point_cloud(lifted, coords, valid):
    """Concatenate valid (position, feature) pairs in a fixed order.

    Order is row-major over pixels, then bins within a pixel, so identical
    inputs always produce identical point order.
    """
    n_bins, c, hf, wf = lifted.data.shape
    if coords.shape != (n_bins, hf, wf, 3) or valid.shape != (n_bins, hf, wf):
        raise DimensionError(
            f"lifted {lifted.data.shape} vs coords {coords.shape} / valid {valid.shape}")
    feats = ad.reshape(ad.transpose(lifted, (2, 3, 0, 1)), (hf * wf * n_bins, c))
    xyz = coords.transpose(1, 2, 0, 3).reshape(hf * wf * n_bins, 3)
    flat_valid = valid.transpose(1, 2, 0).reshape(-1)
    keep = np.nonzero(flat_valid)[0]
    return FeaturePointCloud(xyz=xyz[keep], features=ad.gather_rows(feats, keep))


def lift_scene_features(fused, height_pred, frame, coords=None, valid=None):
    """outer_product_lift + frustum placement in one call.

    Geometry depends only on the camera, so callers may pass precomputed
    (coords, valid) to avoid recomputing it every training step.
    """
    lifted = outer_product_lift(fused, height_pred)
    if coords is None or valid is None:
        coords, valid = frustum_to_ego(height_pred.spec, frame, fused.stride,
                                       (fused.height, fused.width))
    return build_point_cloud(lifted, coords, valid)
