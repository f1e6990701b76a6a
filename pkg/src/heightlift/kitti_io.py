"""On-disk formats: labels, calibration, ground plane, detections, reports.

Labels follow the 15-field roadside annotation layout (category, truncation,
occlusion, alpha, 2D box, dimensions h/w/l, camera-frame bottom-center
location, rotation_y), whitespace-separated ASCII. Floats are written with
repr so every emitted file parses back to the same values.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .boxes import Box3D, Detection, normalize_yaw
from .errors import ParseError
from .geometry import CameraIntrinsics, GroundPlane, ego_from_cam_transform
from . import autodiff as ad

LABEL_FIELDS = 15


@dataclass(frozen=True)
class LabelRecord:
    category: str
    truncation: float
    occlusion: int
    alpha: float
    bbox2d: tuple          # (left, top, right, bottom) pixels
    dimensions: tuple      # (h, w, l) meters
    location: tuple        # (x, y, z) camera frame, bottom center
    rotation_y: float


def _float(token, line_no, what):
    try:
        return float(token)
    except ValueError:
        raise ParseError(f"{what}: not a number: {token!r}", line=line_no) from None


def parse_labels(text):
    records = []
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        tokens = line.split()
        if len(tokens) != LABEL_FIELDS:
            raise ParseError(f"expected {LABEL_FIELDS} fields, got {len(tokens)}",
                             line=line_no)
        values = [_float(t, line_no, f"field {i + 2}") for i, t in enumerate(tokens[1:])]
        records.append(LabelRecord(
            category=tokens[0],
            truncation=values[0],
            occlusion=int(values[1]),
            alpha=values[2],
            bbox2d=tuple(values[3:7]),
            dimensions=tuple(values[7:10]),
            location=tuple(values[10:13]),
            rotation_y=values[13],
        ))
    return records


def serialize_labels(records):
    lines = []
    for r in records:
        fields = [r.category, repr(float(r.truncation)), repr(float(r.occlusion)),
                  repr(float(r.alpha)),
                  *(repr(float(v)) for v in r.bbox2d),
                  *(repr(float(v)) for v in r.dimensions),
                  *(repr(float(v)) for v in r.location),
                  repr(float(r.rotation_y))]
        lines.append(" ".join(fields))
    return "\n".join(lines) + ("\n" if lines else "")


def parse_calib(text):
    """Read intrinsics from the 'P2:' projection line (row-major 3x4)."""
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line.startswith("P2:"):
            continue
        tokens = line.split()[1:]
        if len(tokens) != 12:
            raise ParseError(f"P2 line needs 12 floats, got {len(tokens)}", line=line_no)
        m = np.array([_float(t, line_no, "P2") for t in tokens]).reshape(3, 4)
        return CameraIntrinsics(fx=m[0, 0], fy=m[1, 1], cx=m[0, 2], cy=m[1, 2])
    raise ParseError("no 'P2:' line found")


def serialize_calib(intrinsics):
    p2 = [intrinsics.fx, 0.0, intrinsics.cx, 0.0,
          0.0, intrinsics.fy, intrinsics.cy, 0.0,
          0.0, 0.0, 1.0, 0.0]
    return "P2: " + " ".join(repr(float(v)) for v in p2) + "\n"


def parse_ground_plane(text):
    line = text.strip().splitlines()[0] if text.strip() else ""
    tokens = line.split()
    if len(tokens) != 4:
        raise ParseError(f"ground plane needs 4 floats, got {len(tokens)}", line=1)
    a, b, c, d = (_float(t, 1, "plane") for t in tokens)
    return GroundPlane.from_coefficients(a, b, c, d)


def serialize_ground_plane(plane):
    return " ".join(repr(float(v)) for v in (plane.a, plane.b, plane.c, plane.d)) + "\n"


# ---------------------------------------------------------------------------
# label <-> ego box conversion


def _ground_heading_matrix(frame):
    """2x2 map from camera-frame (x, z) heading components to ego (x, y)."""
    r = ego_from_cam_transform(frame).rotation
    return np.array([[r[0, 0], r[0, 2]],
                     [r[1, 0], r[1, 2]]])


def rotation_y_to_ego_yaw(rotation_y, frame):
    m = _ground_heading_matrix(frame)
    g = m @ np.array([math.cos(rotation_y), -math.sin(rotation_y)])
    return normalize_yaw(math.atan2(g[1], g[0]))


def ego_yaw_to_rotation_y(yaw, frame):
    m = _ground_heading_matrix(frame)
    w = np.linalg.solve(m, np.array([math.cos(yaw), math.sin(yaw)]))
    return normalize_yaw(math.atan2(-w[1], w[0]))


def gt_to_ego_boxes(labels, frame):
    """Lift labels to ego-frame boxes; labels behind the camera are skipped.

    Returns (list of (Box3D, category), number skipped). The label location
    is the camera-frame bottom center; the box center sits half a height up.
    """
    to_ego = ego_from_cam_transform(frame)
    boxes = []
    skipped = 0
    for r in labels:
        if r.location[2] <= 0.0:
            skipped += 1
            continue
        bottom = to_ego.apply(np.array(r.location))
        h, w, l = r.dimensions
        yaw = rotation_y_to_ego_yaw(r.rotation_y, frame)
        boxes.append((Box3D(cx=float(bottom[0]), cy=float(bottom[1]),
                            cz=float(bottom[2]) + h / 2.0,
                            length=l, width=w, height=h, yaw=yaw), r.category))
    return boxes, skipped


def ego_box_to_label(box, category, frame, occlusion=0, truncation=0.0,
                     bbox2d=(0.0, 0.0, 0.0, 0.0)):
    """Inverse of gt_to_ego_boxes for one box."""
    to_cam = ego_from_cam_transform(frame).inverse()
    bottom_ego = np.array([box.cx, box.cy, box.cz - box.height / 2.0])
    location = to_cam.apply(bottom_ego)
    rotation_y = ego_yaw_to_rotation_y(box.yaw, frame)
    alpha = normalize_yaw(rotation_y - math.atan2(location[0], location[2]))
    return LabelRecord(
        category=category,
        truncation=truncation,
        occlusion=occlusion,
        alpha=alpha,
        bbox2d=tuple(float(v) for v in bbox2d),
        dimensions=(box.height, box.width, box.length),
        location=(float(location[0]), float(location[1]), float(location[2])),
        rotation_y=rotation_y,
    )


# ---------------------------------------------------------------------------
# detections, reports, model files


def serialize_detections(per_scene):
    """JSON lines, one detection per line: {scene, class, score, box}."""
    lines = []
    for scene_id, dets in per_scene:
        for d in dets:
            lines.append(json.dumps({"scene": scene_id, "class": d.class_name,
                                     "score": d.score, "box": d.box.as_list()},
                                    sort_keys=True))
    return "\n".join(lines) + ("\n" if lines else "")


def parse_detections(text):
    out = []
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        try:
            doc = json.loads(line)
            det = Detection(box=Box3D.from_list(doc["box"]),
                            class_name=str(doc["class"]), score=float(doc["score"]))
            out.append((str(doc.get("scene", "")), det))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"bad detection line: {exc}", line=line_no) from None
    return out


def serialize_report(report):
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def save_model(params, path):
    with open(path, "w") as fh:
        fh.write(ad.params_to_json(params))


def load_model(params, path):
    with open(path) as fh:
        arrays = ad.params_from_json(fh.read())
    ad.load_params_into(params, arrays)


def serialize_height_map(height_map):
    return "\n".join(" ".join(repr(float(v)) for v in row) for row in height_map) + "\n"


def parse_height_map(text):
    rows = [[float(t) for t in line.split()] for line in text.splitlines() if line.strip()]
    return np.array(rows)
