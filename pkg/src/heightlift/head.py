"""Center-heatmap detection head: forward, target encoding, decoding, NMS, loss.

The head shares a 3x3 trunk and splits into a sigmoid per-class center
heatmap and a linear regression map with channels
(dx, dy, z, log L, log W, log H, sin yaw, cos yaw). Training uses the
penalty-reduced focal loss on the heatmap plus an L1 term on the regression
channels at ground-truth center cells. Yaw is regressed as (sin, cos) to
avoid the wrap-around discontinuity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .boxes import Box3D, Detection, normalize_yaw
from .errors import DimensionError
from .heightnet import conv1x1
from .metrics import bev_iou
from .params import conv3x3_init, linear_init, zeros

N_REGRESSION_CHANNELS = 8


@dataclass(eq=False)
class HeadOutput:
    heatmap: Tensor     # (n_classes, cells_y, cells_x), sigmoid probabilities
    regression: Tensor  # (8, cells_y, cells_x)

    def __post_init__(self):
        if self.heatmap.data.shape[1:] != self.regression.data.shape[1:]:
            raise DimensionError(
                f"heatmap {self.heatmap.shape} vs regression {self.regression.shape}")
        if self.regression.shape[0] != N_REGRESSION_CHANNELS:
            raise DimensionError(
                f"regression needs {N_REGRESSION_CHANNELS} channels, got {self.regression.shape[0]}")


@dataclass(eq=False)
class TargetMaps:
    heatmap: np.ndarray     # (n_classes, cells_y, cells_x)
    regression: np.ndarray  # (8, cells_y, cells_x)
    mask: np.ndarray        # (cells_y, cells_x) bool, supervised cells
    n_peaks: int
    n_skipped: int


HEAD_OUTPUT_SCALE = 40.0


def init_head(rng, channels, n_classes, trunk_gain=2.0, trunk_width=4):
    # a wide trunk gives the zero-initialized 1x1 output layers many nearly
    # independent neighborhood features to combine linearly
    wide = trunk_width * channels
    return {
        "head.trunk.weight": conv3x3_init(rng, wide, channels, gain=trunk_gain),
        "head.trunk.bias": zeros((wide,)),
        "head.heatmap.weight": zeros((n_classes, wide)),
        "head.heatmap.bias": zeros((n_classes,)),
        "head.regression.weight": zeros((N_REGRESSION_CHANNELS, wide)),
        "head.regression.bias": zeros((N_REGRESSION_CHANNELS,)),
    }


def head_forward(params, f_bev):
    """Shared 3x3 trunk, then parallel 1x1 heatmap and regression heads.

    The fixed output scale on both 1x1 layers lets the zero-initialized
    outputs reach useful logit and regression ranges within a short adaptive
    optimizer budget (each weight moves about lr per step).
    """
    trunk_w = params["head.trunk.weight"]
    if f_bev.data.shape[0] != trunk_w.shape[1]:
        raise DimensionError(
            f"BEV has {f_bev.data.shape[0]} channels, head expects {trunk_w.shape[1]}")
    trunk = ad.relu(ad.conv2d(f_bev.data, trunk_w, params["head.trunk.bias"],
                              stride=1, pad=1))
    heat = ad.sigmoid(conv1x1(trunk, params["head.heatmap.weight"],
                              params["head.heatmap.bias"],
                              output_scale=HEAD_OUTPUT_SCALE))
    reg = conv1x1(trunk, params["head.regression.weight"],
                  params["head.regression.bias"], output_scale=HEAD_OUTPUT_SCALE)
    return HeadOutput(heatmap=heat, regression=reg)


def _gaussian_radius(l_cells, w_cells):
    # sized from the long footprint side: nearby cells routinely carry real
    # object evidence, so they get the penalty-reduced treatment
    return max(1, int(round(0.4 * max(l_cells, w_cells))))


def _splat_gaussian(heat, iy, ix, radius):
    sigma = (2.0 * radius + 1.0) / 6.0
    cy, cx = heat.shape
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            y, x = iy + dy, ix + dx
            if 0 <= y < cy and 0 <= x < cx:
                value = math.exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma))
                heat[y, x] = max(heat[y, x], min(value, 1.0))


def encode_targets(gts, spec, n_classes):
    """Gaussian center splats plus center-cell regression targets.

    ``gts`` is a list of (Box3D, class_id). Boxes with centers outside the
    grid extent are skipped and counted. Overlapping splats are max-combined.
    """
    heat = np.zeros((n_classes, spec.cells_y, spec.cells_x))
    reg = np.zeros((N_REGRESSION_CHANNELS, spec.cells_y, spec.cells_x))
    mask = np.zeros((spec.cells_y, spec.cells_x), dtype=bool)
    n_peaks = 0
    n_skipped = 0
    for box, class_id in gts:
        tx = (box.cx - spec.x_min) / spec.resolution
        ty = (box.cy - spec.y_min) / spec.resolution
        ix, iy = int(math.floor(tx)), int(math.floor(ty))
        if not (0 <= ix < spec.cells_x and 0 <= iy < spec.cells_y):
            n_skipped += 1
            continue
        radius = _gaussian_radius(box.length / spec.resolution,
                                  box.width / spec.resolution)
        _splat_gaussian(heat[class_id], iy, ix, radius)
        heat[class_id, iy, ix] = 1.0
        reg[:, iy, ix] = (tx - ix, ty - iy, box.cz,
                          math.log(box.length), math.log(box.width), math.log(box.height),
                          math.sin(box.yaw), math.cos(box.yaw))
        mask[iy, ix] = True
        n_peaks += 1
    return TargetMaps(heatmap=heat, regression=reg, mask=mask,
                      n_peaks=n_peaks, n_skipped=n_skipped)


def decode_boxes(out, spec, classes, max_dets=128, score_thr=0.1):
    """3x3 local maxima above threshold, decoded to boxes, best first."""
    heat = out.heatmap.data
    reg = out.regression.data
    n_classes, cy, cx = heat.shape
    padded = np.full((n_classes, cy + 2, cx + 2), -np.inf)
    padded[:, 1:-1, 1:-1] = heat
    neighborhood = np.stack([padded[:, 1 + dy:1 + dy + cy, 1 + dx:1 + dx + cx]
                             for dy in (-1, 0, 1) for dx in (-1, 0, 1)])
    is_peak = heat >= neighborhood.max(axis=0)
    candidates = np.argwhere(is_peak & (heat >= score_thr))
    scored = sorted(((float(heat[c, iy, ix]), int(c), int(iy), int(ix))
                     for c, iy, ix in candidates),
                    key=lambda t: (-t[0], t[1], t[2], t[3]))
    detections = []
    for score, c, iy, ix in scored[:max_dets]:
        dx, dy, z, log_l, log_w, log_h, sin_t, cos_t = reg[:, iy, ix]
        yaw = normalize_yaw(math.atan2(sin_t, cos_t))
        box = Box3D(cx=spec.x_min + (ix + dx) * spec.resolution,
                    cy=spec.y_min + (iy + dy) * spec.resolution,
                    cz=float(z),
                    length=math.exp(log_l), width=math.exp(log_w), height=math.exp(log_h),
                    yaw=yaw)
        detections.append(Detection(box=box, class_name=classes[c], score=score))
    return detections


def rotated_nms(detections, iou_thr):
    """Greedy per-class suppression by BEV rotated IoU."""
    if not 0.0 < iou_thr < 1.0:
        raise ValueError(f"iou_thr {iou_thr} outside (0, 1)")
    kept = []
    by_class = {}
    for i, det in enumerate(detections):
        by_class.setdefault(det.class_name, []).append((det, i))
    for cls in sorted(by_class):
        pool = sorted(by_class[cls], key=lambda t: (-t[0].score, t[1]))
        chosen = []
        for det, _ in pool:
            if all(bev_iou(det.box, other.box) < iou_thr for other in chosen):
                chosen.append(det)
        kept.extend(chosen)
    kept.sort(key=lambda d: -d.score)
    return kept


def detection_loss(out, targets, regression_weight=0.25, eps=1e-12):
    """Penalty-reduced focal loss plus masked L1 regression.

    Focal terms are normalized by the number of ground-truth peaks; the L1
    term averages over supervised cells and channels. With no supervised
    cells only the heatmap loss remains.
    """
    if out.heatmap.data.shape != targets.heatmap.shape:
        raise DimensionError(
            f"heatmap {out.heatmap.shape} vs targets {targets.heatmap.shape}")
    t = targets.heatmap
    pos = ad.constant((t >= 1.0).astype(np.float64))
    neg_weight = ad.constant(((1.0 - t) ** 4) * (t < 1.0))
    p = ad.clip(out.heatmap, eps, 1.0 - eps)
    one = Tensor(1.0)
    pos_term = ad.mul(pos, ad.mul(ad.power(ad.sub(one, p), 2.0), ad.log(p)))
    neg_term = ad.mul(neg_weight, ad.mul(ad.power(p, 2.0), ad.log(ad.sub(one, p))))
    norm = 1.0 / max(1, targets.n_peaks)
    focal = ad.mul(ad.sub(Tensor(0.0), ad.add(ad.tsum(pos_term), ad.tsum(neg_term))),
                   Tensor(norm))

    n_sup = int(targets.mask.sum())
    if n_sup == 0:
        return focal
    mask = ad.constant(targets.mask.astype(np.float64)[None, :, :])
    diff = ad.absolute(ad.sub(out.regression, ad.constant(targets.regression)))
    l1 = ad.mul(ad.tsum(ad.mul(diff, mask)),
                Tensor(1.0 / (N_REGRESSION_CHANNELS * n_sup)))
    return ad.add(focal, ad.mul(l1, Tensor(regression_weight)))
