"""Detection metrics: rotated IoU, greedy matching, AP at 40 recall points,
similarity components, the weighted composite score, and difficulty binning.

The BEV overlap of two oriented boxes comes from Sutherland-Hodgman clipping
of one footprint rectangle against the other; the 3D IoU multiplies that
area by the vertical interval overlap. Everything here is pure and operates
on plain python/numpy data.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .boxes import Box3D


class DifficultyLevel(enum.IntEnum):
    EASY = 0
    MID = 1
    HARD = 2


@dataclass(frozen=True)
class RopeWeights:
    """Blend weights for the AP term and the similarity composite."""

    ap_weight: float = 8.0
    similarity_weight: float = 2.0

    def __post_init__(self):
        if self.ap_weight <= 0 or self.similarity_weight <= 0:
            raise ValueError("weights must be positive")


@dataclass
class MatchSet:
    """Greedy matching outcome for one class (optionally many scenes)."""

    pairs: list = field(default_factory=list)          # (pred_idx, gt_idx, iou)
    unmatched_preds: list = field(default_factory=list)
    unmatched_gts: list = field(default_factory=list)


@dataclass(frozen=True)
class SimilarityComponents:
    acs: float  # ground-center similarity
    aos: float  # orientation similarity
    agd: float  # mean ground-corner distance (meters, not a similarity)
    ags: float  # ground-corner similarity
    aas: float  # footprint area similarity


# ---------------------------------------------------------------------------
# rotated-rectangle geometry


def bev_footprint(box):
    """Four (x, y) corners of the box footprint, counter-clockwise."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    hl, hw = box.length / 2.0, box.width / 2.0
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([box.cx, box.cy])


def polygon_area(points):
    """Shoelace area of a simple polygon given CCW points."""
    if len(points) < 3:
        return 0.0
    x = points[:, 0]
    y = points[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_polygon(subject, clipper):
    """Sutherland-Hodgman clip of a polygon against a convex CCW clipper."""
    output = [tuple(p) for p in subject]
    n = len(clipper)
    for i in range(n):
        if not output:
            return []
        ax, ay = clipper[i]
        bx, by = clipper[(i + 1) % n]
        ex, ey = bx - ax, by - ay

        def inside(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax) >= 0.0

        def intersect(p, q):
            dx, dy = q[0] - p[0], q[1] - p[1]
            denom = ex * dy - ey * dx
            t = (ey * (p[0] - ax) - ex * (p[1] - ay)) / denom
            return (p[0] + t * dx, p[1] + t * dy)

        holder = output
        output = []
        prev = holder[-1]
        prev_in = inside(prev)
        for cur in holder:
            cur_in = inside(cur)
            if cur_in:
                if not prev_in:
                    output.append(intersect(prev, cur))
                output.append(cur)
            elif prev_in:
                output.append(intersect(prev, cur))
            prev, prev_in = cur, cur_in
    return output


def bev_intersection_area(box_a, box_b):
    poly = clip_polygon(bev_footprint(box_a), bev_footprint(box_b))
    if len(poly) < 3:
        return 0.0
    return max(0.0, polygon_area(np.array(poly)))


def bev_iou(box_a, box_b):
    """Rotated IoU of the 2D footprints."""
    inter = bev_intersection_area(box_a, box_b)
    union = box_a.length * box_a.width + box_b.length * box_b.width - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def rotated_iou_3d(box_a, box_b):
    """Footprint overlap times vertical overlap over the union volume."""
    inter_area = bev_intersection_area(box_a, box_b)
    lo_a, hi_a = box_a.z_interval()
    lo_b, hi_b = box_b.z_interval()
    dz = max(0.0, min(hi_a, hi_b) - max(lo_a, lo_b))
    inter = inter_area * dz
    union = box_a.volume() + box_b.volume() - inter
    if union <= 0.0:
        return 0.0
    return min(1.0, max(0.0, inter / union))


# ---------------------------------------------------------------------------
# matching and average precision


def match_detections(pred_boxes, pred_scores, gt_boxes, iou_thr):
    """Greedy one-to-one matching, best IoU first, highest scores first."""
    order = sorted(range(len(pred_boxes)), key=lambda i: (-pred_scores[i], i))
    taken = [False] * len(gt_boxes)
    matches = MatchSet()
    for pi in order:
        best_iou, best_gt = 0.0, -1
        for gi, gt in enumerate(gt_boxes):
            if taken[gi]:
                continue
            iou = rotated_iou_3d(pred_boxes[pi], gt)
            if iou >= iou_thr and iou > best_iou:
                best_iou, best_gt = iou, gi
        if best_gt >= 0:
            taken[best_gt] = True
            matches.pairs.append((pi, best_gt, best_iou))
        else:
            matches.unmatched_preds.append(pi)
    matches.unmatched_gts = [gi for gi, used in enumerate(taken) if not used]
    return matches


def _tp_flags(preds, gts, iou_thr):
    """Score-ordered true/false-positive flags, greedy per scene.

    ``preds`` are (scene_id, Box3D, score); ``gts`` are (scene_id, Box3D).
    """
    gt_by_scene = {}
    for scene, box in gts:
        gt_by_scene.setdefault(scene, []).append(box)
    taken = {scene: [False] * len(boxes) for scene, boxes in gt_by_scene.items()}
    order = sorted(range(len(preds)), key=lambda i: (-preds[i][2], i))
    flags = []
    for i in order:
        scene, box, _ = preds[i]
        pool = gt_by_scene.get(scene, [])
        best_iou, best_gi = 0.0, -1
        for gi, gt in enumerate(pool):
            if taken[scene][gi]:
                continue
            iou = rotated_iou_3d(box, gt)
            if iou >= iou_thr and iou > best_iou:
                best_iou, best_gi = iou, gi
        if best_gi >= 0:
            taken[scene][best_gi] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags


def ap_r40(preds, gts, iou_thr):
    """Interpolated average precision at 40 evenly spaced recall thresholds.

    Precision at each recall threshold r is the maximum precision over all
    operating points whose recall is >= r. With no ground truth the metric is
    undefined and NaN is returned.
    """
    n_gt = len(gts)
    if n_gt == 0:
        return float("nan")
    flags = _tp_flags(preds, gts, iou_thr)
    if not flags:
        return 0.0
    tp = np.cumsum(np.asarray(flags, dtype=np.float64))
    ranks = np.arange(1, len(flags) + 1, dtype=np.float64)
    precision = tp / ranks
    recall = tp / n_gt
    total = 0.0
    for k in range(1, 41):
        r = k / 40.0
        attained = precision[recall >= r - 1e-12]
        total += float(attained.max()) if attained.size else 0.0
    return total / 40.0


# ---------------------------------------------------------------------------
# similarity components and the composite score


def _corner_distance(box_a, box_b):
    """Mean corner distance under the best of the four cyclic pairings."""
    ca = bev_footprint(box_a)
    cb = bev_footprint(box_b)
    best = math.inf
    for shift in range(4):
        rolled = np.roll(cb, shift, axis=0)
        mean = float(np.linalg.norm(ca - rolled, axis=1).mean())
        best = min(best, mean)
    return best


def similarity_components(matches, pred_boxes, gt_boxes,
                          center_tolerance=2.0, corner_tolerance=2.0):
    """Averaged per-match similarities; an empty match set scores zero."""
    if not matches.pairs:
        return SimilarityComponents(acs=0.0, aos=0.0, agd=0.0, ags=0.0, aas=0.0)
    acs = aos = agd = ags = aas = 0.0
    for pi, gi, _ in matches.pairs:
        p, g = pred_boxes[pi], gt_boxes[gi]
        center = math.hypot(p.cx - g.cx, p.cy - g.cy)
        acs += max(0.0, 1.0 - center / center_tolerance)
        aos += (1.0 + math.cos(p.yaw - g.yaw)) / 2.0
        corner = _corner_distance(p, g)
        agd += corner
        ags += max(0.0, 1.0 - corner / corner_tolerance)
        area_p = p.length * p.width
        area_g = g.length * g.width
        aas += min(area_p, area_g) / max(area_p, area_g)
    n = len(matches.pairs)
    return SimilarityComponents(acs=acs / n, aos=aos / n, agd=agd / n,
                                ags=ags / n, aas=aas / n)


def rope_score(ap, components, weights=RopeWeights(), fourth_component="aas"):
    """Weighted blend of AP with the similarity composite S.

    S averages center, orientation, area, and corner similarities. The
    ``fourth_component`` flag swaps the area term for the corner-distance
    similarity ("ags") for callers who prefer a distance-derived fourth term.
    """
    if fourth_component == "aas":
        fourth = components.aas
    elif fourth_component == "ags":
        fourth = components.ags
    else:
        raise ValueError(f"unknown fourth component {fourth_component!r}")
    s = (components.acs + components.aos + fourth + components.ags) / 4.0
    w1, w2 = weights.ap_weight, weights.similarity_weight
    return (w1 * ap + w2 * s) / (w1 + w2)


def difficulty_bin(occlusion_code):
    """Map a label occlusion code onto a difficulty level.

    0 is unoccluded, 1 partially occluded, 2 heavily occluded; anything else
    is treated conservatively as hard.
    """
    if occlusion_code == 0:
        return DifficultyLevel.EASY
    if occlusion_code == 1:
        return DifficultyLevel.MID
    return DifficultyLevel.HARD


# ---------------------------------------------------------------------------
# full evaluation report


def evaluate_detections(preds, gts, classes, iou_thr, weights=RopeWeights(),
                        fourth_component="aas"):
    """Per-class, per-difficulty metric report.

    ``preds``: (scene_id, Detection); ``gts``: (scene_id, class_name, Box3D,
    occlusion_code). Difficulty bins are cumulative: the MID bin contains
    EASY and MID ground truth, HARD contains everything.
    """
    report = {}
    for cls in classes:
        cls_preds = [(s, d.box, d.score) for s, d in preds if d.class_name == cls]
        by_scene_preds = {}
        for s, b, sc in cls_preds:
            by_scene_preds.setdefault(s, []).append((b, sc))
        report[cls] = {}
        for level in DifficultyLevel:
            cls_gts = [(s, box) for s, name, box, occ in gts
                       if name == cls and difficulty_bin(occ) <= level]
            ap = ap_r40(cls_preds, cls_gts, iou_thr)
            by_scene_gts = {}
            for s, b in cls_gts:
                by_scene_gts.setdefault(s, []).append(b)
            # pool per-scene matches so the similarity terms cover every match
            pooled = MatchSet()
            pred_pool, gt_pool = [], []
            for scene in sorted(by_scene_preds):
                boxes = [b for b, _ in by_scene_preds[scene]]
                scores = [sc for _, sc in by_scene_preds[scene]]
                gt_boxes = by_scene_gts.get(scene, [])
                m = match_detections(boxes, scores, gt_boxes, iou_thr)
                off_p, off_g = len(pred_pool), len(gt_pool)
                pooled.pairs.extend((pi + off_p, gi + off_g, iou)
                                    for pi, gi, iou in m.pairs)
                pred_pool.extend(boxes)
                gt_pool.extend(gt_boxes)
            comps = similarity_components(pooled, pred_pool, gt_pool)
            score = (rope_score(ap, comps, weights, fourth_component)
                     if not math.isnan(ap) else float("nan"))
            report[cls][level.name.title()] = {
                "ap_r40": None if math.isnan(ap) else ap,
                "rope_score": None if math.isnan(score) else score,
                "acs": comps.acs,
                "aos": comps.aos,
                "agd": comps.agd,
                "ags": comps.ags,
                "aas": comps.aas,
                "n_gt": len(cls_gts),
                "n_pred": len(cls_preds),
            }
    return report
