"""Deterministic synthetic roadside scenes for end-to-end testing.

A scene samples a camera (height, downward pitch, focal length), scatters
non-overlapping boxes on the ground inside the BEV extent, and renders a
semantic painting: every pixel whose ray hits a box takes that object's
class color, and the ideal height map records the top-surface height of the
tallest box the ray passes through (0 on open ground). The painting is a
stand-in for imagery; it exercises the lift/fuse/pool/detect machinery, not
photometrics.
"""

from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .boxes import Box3D, normalize_yaw
from .errors import ParseError, PlacementError
from .geometry import (CameraIntrinsics, GroundPlane, frame_from_plane,
                       ego_from_cam_transform, project_ego_to_pixel)
from .kitti_io import (ego_box_to_label, gt_to_ego_boxes, parse_calib,
                       parse_ground_plane, parse_labels, parse_height_map,
                       serialize_calib, serialize_ground_plane,
                       serialize_height_map, serialize_labels)
from .metrics import bev_intersection_area
from .render import image_to_ppm, ppm_to_image

CLASS_COLORS = {
    "Car": (0.20, 0.72, 0.30),
    "Big-vehicle": (0.92, 0.78, 0.22),
    "Cyclist": (0.85, 0.28, 0.25),
}
CLASS_DIMS = {  # (length, width, height) mean and jitter, meters
    "Car": ((4.4, 1.9, 1.55), (0.4, 0.15, 0.15)),
    "Big-vehicle": ((9.0, 2.5, 3.3), (1.2, 0.2, 0.35)),
    "Cyclist": ((1.8, 0.6, 1.7), (0.2, 0.08, 0.12)),
}
GROUND_COLOR = 0.45


@dataclass(frozen=True)
class SyntheticSceneSpec:
    seed: int = 0
    n_objects: dict = field(default_factory=lambda: {"Car": 3, "Big-vehicle": 1,
                                                     "Cyclist": 1})
    image_height: int = 64
    image_width: int = 96
    camera_height_range: tuple = (4.0, 8.0)
    pitch_range_deg: tuple = (5.0, 15.0)
    focal_range: tuple = (70.0, 100.0)
    x_extent: tuple = (0.0, 51.2)
    y_extent: tuple = (-25.6, 25.6)
    noise_level: float = 0.02


@dataclass(eq=False)
class GeneratedScene:
    intrinsics: CameraIntrinsics
    plane: GroundPlane
    labels: list
    image: np.ndarray       # (3, H, W) float in [0, 1]
    height_map: np.ndarray  # (H, W) meters
    boxes: list             # (Box3D, class_name) in generator order


@dataclass(eq=False)
class SceneData:
    """One scene as read back from disk."""

    scene_id: str
    intrinsics: CameraIntrinsics
    plane: GroundPlane
    frame: object
    labels: list
    image: np.ndarray
    gt_boxes: list  # (Box3D, class_name)
    height_map: np.ndarray = None


def _sample_camera(rng, spec):
    big_h = rng.uniform(*spec.camera_height_range)
    pitch = math.radians(rng.uniform(*spec.pitch_range_deg))
    focal = rng.uniform(*spec.focal_range)
    intrinsics = CameraIntrinsics(fx=focal, fy=focal,
                                  cx=spec.image_width / 2.0,
                                  cy=spec.image_height / 2.0)
    # ground plane of a camera pitched down by `pitch` above a flat road
    plane = GroundPlane.from_coefficients(0.0, -math.cos(pitch), -math.sin(pitch), big_h)
    return intrinsics, plane


def _visible(box, frame, spec, margin=2.0):
    try:
        s = project_ego_to_pixel(np.array([box.cx, box.cy, box.height / 2.0]), frame)
    except Exception:
        return False
    return (margin <= s.u <= spec.image_width - margin
            and margin <= s.v <= spec.image_height - margin)


def _place_objects(rng, spec, frame):
    placed = []
    x_lo = max(spec.x_extent[0] + 3.0, 8.0)
    x_hi = spec.x_extent[1] - 3.0
    y_lo, y_hi = spec.y_extent[0] + 3.0, spec.y_extent[1] - 3.0
    for cls in sorted(spec.n_objects):
        (dims_mean, dims_jitter) = CLASS_DIMS[cls]
        for _ in range(spec.n_objects[cls]):
            for attempt in range(100):
                length, width, height = (m + rng.uniform(-j, j)
                                         for m, j in zip(dims_mean, dims_jitter))
                yaw = normalize_yaw(rng.uniform(-math.pi, math.pi))
                box = Box3D(cx=rng.uniform(x_lo, x_hi), cy=rng.uniform(y_lo, y_hi),
                            cz=height / 2.0, length=length, width=width,
                            height=height, yaw=yaw)
                if not _visible(box, frame, spec):
                    continue
                if any(bev_intersection_area(box, other) > 0.0
                       for other, _ in placed):
                    continue
                placed.append((box, cls))
                break
            else:
                raise PlacementError(
                    f"could not place {cls} #{len(placed) + 1} after 100 attempts")
    return placed


def _ray_box_entry(origins, directions, box):
    """Vectorized slab test of rays against one yaw-rotated box.

    Returns (hit mask, entry parameter t). Rays descend toward the ground, so
    the entry point is the highest surface point the ray touches on the box.
    """
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    offset = origins - np.array([box.cx, box.cy, box.cz])
    ox = c * offset[:, 0] + s * offset[:, 1]
    oy = -s * offset[:, 0] + c * offset[:, 1]
    oz = offset[:, 2]
    dx = c * directions[:, 0] + s * directions[:, 1]
    dy = -s * directions[:, 0] + c * directions[:, 1]
    dz = directions[:, 2]
    t_lo = np.full(origins.shape[0], -np.inf)
    t_hi = np.full(origins.shape[0], np.inf)
    hit = np.ones(origins.shape[0], dtype=bool)
    for o, d, half in ((ox, dx, box.length / 2.0), (oy, dy, box.width / 2.0),
                       (oz, dz, box.height / 2.0)):
        parallel = np.abs(d) < 1e-12
        hit &= ~parallel | (np.abs(o) <= half)
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-half - o) / d
            t2 = (half - o) / d
        near = np.where(parallel, -np.inf, np.minimum(t1, t2))
        far = np.where(parallel, np.inf, np.maximum(t1, t2))
        t_lo = np.maximum(t_lo, near)
        t_hi = np.minimum(t_hi, far)
    entry = np.maximum(t_lo, 0.0)
    return hit & (t_hi >= entry), entry


def _paint(spec, frame, placed, rng, noise_level):
    hi, wi = spec.image_height, spec.image_width
    k = frame.intrinsics
    ii, jj = np.meshgrid(np.arange(hi), np.arange(wi), indexing="ij")
    u = jj.ravel() + 0.5
    v = ii.ravel() + 0.5
    dirs_cam = np.stack([(u - k.cx) / k.fx, (v - k.cy) / k.fy, np.ones_like(u)], axis=1)
    to_ego = ego_from_cam_transform(frame)
    dirs = dirs_cam @ to_ego.rotation.T
    origins = np.broadcast_to(to_ego.translation, dirs.shape)

    # first hit along each ray wins; since rays descend, the entry point is
    # also the topmost object surface the ray meets. Pixels are shaded by the
    # height of the surface point they see (dim near the ground, bright at
    # the top), the painting's stand-in for natural vertical shading.
    image = np.full((hi * wi, 3), GROUND_COLOR)
    height_map = np.zeros(hi * wi)
    nearest = np.full(hi * wi, np.inf)
    for box, cls in placed:
        hits, entry = _ray_box_entry(origins, dirs, box)
        take = hits & (entry < nearest)
        seen_z = origins[take, 2] + entry[take] * dirs[take, 2]
        shade = 0.45 + 0.55 * np.clip(seen_z / box.height, 0.0, 1.0)
        image[take] = np.asarray(CLASS_COLORS[cls]) * shade[:, None]
        height_map[take] = seen_z
        nearest[take] = entry[take]
    image = image.reshape(hi, wi, 3).transpose(2, 0, 1)
    if noise_level > 0.0:
        image = np.clip(image + rng.normal(0.0, noise_level, image.shape), 0.0, 1.0)
    return image, height_map.reshape(hi, wi)


def generate_scene(spec):
    """Deterministic per seed: same spec, bit-identical scene."""
    rng = np.random.default_rng(spec.seed)
    intrinsics, plane = _sample_camera(rng, spec)
    frame = frame_from_plane(plane, intrinsics)
    placed = _place_objects(rng, spec, frame)
    image, height_map = _paint(spec, frame, placed, rng, spec.noise_level)
    labels = [ego_box_to_label(box, cls, frame,
                               bbox2d=_project_bbox2d(box, frame, spec))
              for box, cls in placed]
    return GeneratedScene(intrinsics=intrinsics, plane=plane, labels=labels,
                          image=image, height_map=height_map, boxes=placed)


def _box_corners(box):
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    corners = []
    for sx in (-0.5, 0.5):
        for sy in (-0.5, 0.5):
            for sz in (-0.5, 0.5):
                lx, ly, lz = sx * box.length, sy * box.width, sz * box.height
                corners.append((box.cx + c * lx - s * ly,
                                box.cy + s * lx + c * ly,
                                box.cz + lz))
    return np.array(corners)


def _project_bbox2d(box, frame, spec):
    us, vs = [], []
    for corner in _box_corners(box):
        try:
            sample = project_ego_to_pixel(corner, frame)
        except Exception:
            continue
        us.append(sample.u)
        vs.append(sample.v)
    if not us:
        return (0.0, 0.0, 0.0, 0.0)
    return (max(0.0, min(us)), max(0.0, min(vs)),
            min(float(spec.image_width), max(us)),
            min(float(spec.image_height), max(vs)))


# ---------------------------------------------------------------------------
# on-disk scene layout: <root>/{label,calib,denorm,image,height}/<id>.*


def write_scene(root, scene_id, scene):
    for sub in ("label", "calib", "denorm", "image", "height"):
        os.makedirs(os.path.join(root, sub), exist_ok=True)
    with open(os.path.join(root, "label", f"{scene_id}.txt"), "w") as fh:
        fh.write(serialize_labels(scene.labels))
    with open(os.path.join(root, "calib", f"{scene_id}.txt"), "w") as fh:
        fh.write(serialize_calib(scene.intrinsics))
    with open(os.path.join(root, "denorm", f"{scene_id}.txt"), "w") as fh:
        fh.write(serialize_ground_plane(scene.plane))
    with open(os.path.join(root, "image", f"{scene_id}.ppm"), "wb") as fh:
        fh.write(image_to_ppm(scene.image))
    with open(os.path.join(root, "height", f"{scene_id}.txt"), "w") as fh:
        fh.write(serialize_height_map(scene.height_map))


def list_scene_ids(root):
    label_dir = os.path.join(root, "label")
    if not os.path.isdir(label_dir):
        raise ParseError(f"no label directory under {root}")
    return sorted(name[:-4] for name in os.listdir(label_dir) if name.endswith(".txt"))


def read_scene(root, scene_id):
    with open(os.path.join(root, "label", f"{scene_id}.txt")) as fh:
        labels = parse_labels(fh.read())
    with open(os.path.join(root, "calib", f"{scene_id}.txt")) as fh:
        intrinsics = parse_calib(fh.read())
    with open(os.path.join(root, "denorm", f"{scene_id}.txt")) as fh:
        plane = parse_ground_plane(fh.read())
    with open(os.path.join(root, "image", f"{scene_id}.ppm"), "rb") as fh:
        image = ppm_to_image(fh.read())
    height_path = os.path.join(root, "height", f"{scene_id}.txt")
    height_map = None
    if os.path.exists(height_path):
        with open(height_path) as fh:
            height_map = parse_height_map(fh.read())
    frame = frame_from_plane(plane, intrinsics)
    gt_boxes, _ = gt_to_ego_boxes(labels, frame)
    return SceneData(scene_id=scene_id, intrinsics=intrinsics, plane=plane,
                     frame=frame, labels=labels, image=image,
                     gt_boxes=gt_boxes, height_map=height_map)


def generate_dataset(root, seed, count, spec_template):
    """Write `count` scenes with seeds derived deterministically from `seed`."""
    rng = np.random.default_rng(seed)
    child_seeds = rng.integers(0, 2 ** 62, size=count)
    scene_ids = []
    for i in range(count):
        spec = dataclasses.replace(spec_template, seed=int(child_seeds[i]))
        scene = generate_scene(spec)
        scene_id = f"{i:06d}"
        write_scene(root, scene_id, scene)
        scene_ids.append(scene_id)
    return scene_ids
