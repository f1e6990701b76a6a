"""Binary PPM (P6) image output and BEV visualization.

Feature maps render as per-cell channel maxima in grayscale. Box overlays
follow the usual legend: ground truth blue, matched detections green,
unmatched detections red.
"""

from __future__ import annotations

import numpy as np

from .errors import ParseError
from .metrics import bev_footprint, match_detections

GT_COLOR = (40, 90, 255)
TP_COLOR = (40, 220, 60)
FP_COLOR = (230, 40, 40)


def ppm_encode(rgb):
    """Encode an (H, W, 3) uint8 array as binary PPM."""
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    return b"P6\n%d %d\n255\n" % (w, h) + rgb.tobytes()


def ppm_decode(data):
    parts = data.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P6":
        raise ParseError("not a binary P6 PPM")
    try:
        w, h = (int(t) for t in parts[1].split())
        maxval = int(parts[2])
    except ValueError:
        raise ParseError("bad PPM header") from None
    if maxval != 255:
        raise ParseError(f"unsupported PPM maxval {maxval}")
    pixels = np.frombuffer(parts[3][:w * h * 3], dtype=np.uint8)
    if pixels.size != w * h * 3:
        raise ParseError("truncated PPM payload")
    return pixels.reshape(h, w, 3).copy()


def image_to_ppm(image):
    """(3, H, W) float image in [0, 1] -> PPM bytes."""
    rgb = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    return ppm_encode(rgb)


def ppm_to_image(data):
    return ppm_decode(data).astype(np.float64).transpose(2, 0, 1) / 255.0


def render_bev_features(bev):
    """Grayscale per-cell max over channels, row 0 at the top of the image."""
    grid = np.asarray(bev.data.data if hasattr(bev.data, "data") else bev.data)
    strength = grid.max(axis=0)
    peak = strength.max()
    if peak > 0:
        strength = strength / peak
    gray = np.clip(np.round(strength * 255.0), 0, 255).astype(np.uint8)
    return ppm_encode(np.stack([gray, gray, gray], axis=-1)[::-1])


def _cell_of(spec, x, y):
    return ((x - spec.x_min) / spec.resolution, (y - spec.y_min) / spec.resolution)


def _draw_polygon(canvas, spec, corners, color):
    cy, cx = canvas.shape[:2]
    n = len(corners)
    for i in range(n):
        x0, y0 = _cell_of(spec, *corners[i])
        x1, y1 = _cell_of(spec, *corners[(i + 1) % n])
        steps = max(2, int(4 * max(abs(x1 - x0), abs(y1 - y0))) + 1)
        for t in np.linspace(0.0, 1.0, steps):
            px = int(round(x0 + (x1 - x0) * t))
            py = int(round(y0 + (y1 - y0) * t))
            if 0 <= px < cx and 0 <= py < cy:
                canvas[cy - 1 - py, px] = color


def render_bev_boxes(spec, gt_boxes, detections=None, iou_thr=0.3, background=None):
    """Overlay ground truth and detections on the BEV grid.

    ``background`` may be a rendered feature grid (H, W, 3); otherwise the
    canvas starts black. Detections are classified TP/FP by greedy rotated
    IoU matching against the ground truth at ``iou_thr``.
    """
    if background is None:
        canvas = np.zeros((spec.cells_y, spec.cells_x, 3), dtype=np.uint8)
    else:
        canvas = np.array(background, dtype=np.uint8, copy=True)
    detections = detections or []
    boxes = [d.box for d in detections]
    scores = [d.score for d in detections]
    matches = match_detections(boxes, scores, list(gt_boxes), iou_thr)
    matched = {pi for pi, _, _ in matches.pairs}
    for gt in gt_boxes:
        _draw_polygon(canvas, spec, bev_footprint(gt), GT_COLOR)
    for i, det in enumerate(detections):
        color = TP_COLOR if i in matched else FP_COLOR
        _draw_polygon(canvas, spec, bev_footprint(det.box), color)
    return ppm_encode(canvas)
