"""End-to-end assembly: parameters, forward pass, training, inference, eval.

The forward path per scene: backbone features -> camera-parameter
modulation -> height-bin prediction -> deformable fusion of height into
context -> outer-product lift over height bins -> frustum placement ->
voxel pooling -> patch self-attention refinement -> detection head.

Per-scene frustum geometry depends only on the camera, so it is computed
once and cached on the scene. Training cycles scenes in sorted order, sums
batch gradients in a fixed order, and serializes the model and reports
deterministically; two runs with the same inputs produce identical bytes.
"""

from __future__ import annotations

import dataclasses
import math
import os

import numpy as np

from . import autodiff as ad
from . import bev as bev_mod
from . import frustum, head as head_mod, heightnet, kitti_io, metrics, render, synth
from .autodiff import Tape, Tensor
from .config import PipelineConfig
from .errors import ParseError
from .params import AdamW


def bin_spec_of(cfg):
    return heightnet.HeightBinSpec(n_bins=cfg.model.n_bins, h_min=cfg.model.h_min,
                                   h_max=cfg.model.h_max)


def grid_spec_of(cfg):
    return bev_mod.BevGridSpec(x_min=cfg.bev.x_min, x_max=cfg.bev.x_max,
                               y_min=cfg.bev.y_min, y_max=cfg.bev.y_max,
                               resolution=cfg.bev.resolution,
                               channels=cfg.model.d_model)


def dmsc_config_of(cfg):
    return heightnet.DmscConfig(n_heads=cfg.model.dmsc_heads,
                                n_levels=cfg.model.dmsc_levels,
                                n_points=cfg.model.dmsc_points,
                                d_model=cfg.model.d_model)


def vpf_config_of(cfg):
    return bev_mod.VpfConfig(patch_size=cfg.bev.patch_size,
                             n_heads=cfg.bev.vpf_heads, depth=cfg.bev.vpf_depth)


def init_params(cfg):
    """Fresh parameter dict; disabled blocks contribute no parameters."""
    rng = np.random.default_rng(cfg.train.seed)
    params = {}
    params.update(heightnet.init_backbone(rng, cfg.model.d_model))
    params.update(heightnet.init_camera_modulation(rng, cfg.model.d_model,
                                                   hidden=cfg.model.cam_mod_hidden))
    params.update(heightnet.init_height_net(rng, cfg.model.d_model, cfg.model.n_bins))
    if cfg.model.dmsc_enabled:
        params.update(heightnet.init_dmsc(rng, dmsc_config_of(cfg), cfg.model.n_bins))
    if cfg.bev.vpf_enabled:
        params.update(bev_mod.init_vpf(rng, grid_spec_of(cfg), vpf_config_of(cfg)))
    params.update(head_mod.init_head(rng, cfg.model.d_model, len(cfg.classes)))
    return params


def scene_geometry(cfg, scene):
    """Cached (coords, valid) frustum grid for a scene's camera."""
    if getattr(scene, "_frustum_cache", None) is None:
        spec = bin_spec_of(cfg)
        hf, wf = cfg.image.height // 4, cfg.image.width // 4
        scene._frustum_cache = frustum.frustum_to_ego(spec, scene.frame, 4, (hf, wf))
    return scene._frustum_cache


def forward_scene(params, cfg, scene, want_intermediates=False):
    """Run the full network on one scene; returns the head output."""
    image = ad.constant(scene.image)
    feats = heightnet.backbone_forward(params, image)
    context = heightnet.camera_modulation(params, feats, scene.intrinsics)
    height_pred = heightnet.height_net_forward(params, context, bin_spec_of(cfg))
    if cfg.model.dmsc_enabled:
        fused = heightnet.dmsc_forward(params, context, height_pred, dmsc_config_of(cfg))
    else:
        fused = context
    coords, valid = scene_geometry(cfg, scene)
    cloud = frustum.lift_scene_features(fused, height_pred, scene.frame,
                                        coords=coords, valid=valid)
    pooled = bev_mod.voxel_pool(cloud, grid_spec_of(cfg))
    if cfg.bev.vpf_enabled:
        refined = bev_mod.vpf_forward(params, pooled, vpf_config_of(cfg))
    else:
        refined = pooled
    out = head_mod.head_forward(params, refined)
    if want_intermediates:
        return out, {"context": context, "height": height_pred, "fused": fused,
                     "pooled": pooled, "refined": refined, "cloud": cloud}
    return out


@dataclasses.dataclass(eq=False)
class SceneTargets:
    detection: head_mod.TargetMaps
    height_bins: np.ndarray = None
    height_weights: np.ndarray = None


def scene_targets(cfg, scene):
    class_ids = {name: i for i, name in enumerate(cfg.classes)}
    gts = [(box, class_ids[name]) for box, name in scene.gt_boxes
           if name in class_ids]
    det = head_mod.encode_targets(gts, grid_spec_of(cfg), len(cfg.classes))
    height_bins = height_weights = None
    if scene.height_map is not None and cfg.train.height_loss_weight > 0.0:
        spec = bin_spec_of(cfg)
        height_bins = heightnet.height_bin_targets(scene.height_map, spec, 4)
        # object pixels are rare; upweight them so the height net learns
        # objects and not just the road surface
        sampled = scene.height_map[2::4, 2::4][:height_bins.shape[0],
                                               :height_bins.shape[1]]
        height_weights = np.where(sampled > 0.25, 16.0, 1.0)
    return SceneTargets(detection=det, height_bins=height_bins,
                        height_weights=height_weights)


def scene_loss(params, cfg, scene, targets=None):
    """Detection loss plus (when a height map exists) height supervision."""
    if targets is None:
        targets = scene_targets(cfg, scene)
    out, inter = forward_scene(params, cfg, scene, want_intermediates=True)
    loss = head_mod.detection_loss(out, targets.detection)
    if targets.height_bins is not None:
        aux = heightnet.height_loss(inter["height"], targets.height_bins,
                                    targets.height_weights)
        loss = ad.add(loss, ad.mul(aux, Tensor(cfg.train.height_loss_weight)))
    return loss


def load_scenes(scenes_dir):
    ids = synth.list_scene_ids(scenes_dir)
    if not ids:
        raise ParseError(f"no scenes under {scenes_dir}")
    return [synth.read_scene(scenes_dir, sid) for sid in ids]


def mean_loss(params, cfg, scenes, targets):
    total = 0.0
    for scene, target in zip(scenes, targets):
        total += scene_loss(params, cfg, scene, target).item()
    return total / len(scenes)


def train(cfg, scenes_dir, out_path, steps=None, lr=None, seed=None):
    """Deterministic training loop; returns summary statistics.

    One step consumes ``train.batch_size`` scenes in sorted cyclic order and
    sums their gradients in that fixed order before the optimizer update.
    """
    if steps is not None:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, steps=steps))
    if lr is not None:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, lr=lr))
    if seed is not None:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, seed=seed))
    scenes = load_scenes(scenes_dir)
    targets = [scene_targets(cfg, s) for s in scenes]
    params = init_params(cfg)
    optimizer = AdamW(params, lr=cfg.train.lr,
                      betas=(cfg.train.beta1, cfg.train.beta2),
                      eps=cfg.train.eps, weight_decay=cfg.train.weight_decay)

    initial_loss = mean_loss(params, cfg, scenes, targets)
    cursor = 0
    last_step_loss = initial_loss
    for _ in range(cfg.train.steps):
        optimizer.zero_grads()
        step_loss = 0.0
        for _ in range(cfg.train.batch_size):
            scene = scenes[cursor % len(scenes)]
            target = targets[cursor % len(scenes)]
            cursor += 1
            with Tape() as tape:
                loss = scene_loss(params, cfg, scene, target)
            ad.backward(tape, loss)
            step_loss += loss.item()
        if cfg.train.batch_size > 1:
            inv = 1.0 / cfg.train.batch_size
            for name in optimizer.names:
                if params[name].grad is not None:
                    params[name].grad *= inv
        optimizer.step()
        last_step_loss = step_loss / cfg.train.batch_size
    final_loss = mean_loss(params, cfg, scenes, targets)

    if out_path:
        os.makedirs(os.path.dirname(os.path.abspath(out_path)), exist_ok=True)
        kitti_io.save_model(params, out_path)
    return {
        "steps": cfg.train.steps,
        "lr": cfg.train.lr,
        "n_scenes": len(scenes),
        "initial_loss": initial_loss,
        "final_loss": final_loss,
        "last_step_loss": last_step_loss,
        "model_path": out_path,
    }


def load_trained(cfg, model_path):
    params = init_params(cfg)
    kitti_io.load_model(params, model_path)
    return params


def infer(cfg, scenes_dir, model_path, out_path=None):
    """Decode + NMS over every scene; returns [(scene_id, [Detection])]."""
    params = load_trained(cfg, model_path)
    grid = grid_spec_of(cfg)
    results = []
    n_dets = 0
    for scene in load_scenes(scenes_dir):
        out = forward_scene(params, cfg, scene)
        dets = head_mod.decode_boxes(out, grid, list(cfg.classes),
                                     max_dets=cfg.head.max_dets,
                                     score_thr=cfg.head.score_thr)
        dets = head_mod.rotated_nms(dets, cfg.head.nms_iou)
        results.append((scene.scene_id, dets))
        n_dets += len(dets)
    if out_path:
        os.makedirs(os.path.dirname(os.path.abspath(out_path)), exist_ok=True)
        with open(out_path, "w") as fh:
            fh.write(kitti_io.serialize_detections(results))
    return results, n_dets


def ground_truth_records(scenes):
    """(scene_id, class, Box3D, occlusion) tuples for evaluation."""
    records = []
    for scene in scenes:
        occ_by_index = [label.occlusion for label in scene.labels
                        if label.location[2] > 0.0]
        for (box, name), occ in zip(scene.gt_boxes, occ_by_index):
            records.append((scene.scene_id, name, box, occ))
    return records


def evaluate(cfg, preds_path, gts_dir, iou_thr=None, classes=None):
    with open(preds_path) as fh:
        preds = kitti_io.parse_detections(fh.read())
    scenes = load_scenes(gts_dir)
    gts = ground_truth_records(scenes)
    return metrics.evaluate_detections(
        preds, gts,
        classes=list(classes or cfg.classes),
        iou_thr=cfg.eval.iou_thr if iou_thr is None else iou_thr,
        fourth_component=cfg.eval.fourth_component)


def render_scene_bev(cfg, scenes_dir, scene_id=None, preds_path=None,
                     model_path=None, iou_thr=0.3):
    """PPM bytes visualizing a scene's BEV: optional features + boxes."""
    ids = synth.list_scene_ids(scenes_dir)
    scene_id = scene_id or ids[0]
    scene = synth.read_scene(scenes_dir, scene_id)
    background = None
    if model_path:
        params = load_trained(cfg, model_path)
        _, inter = forward_scene(params, cfg, scene, want_intermediates=True)
        feature_ppm = render.render_bev_features(inter["refined"])
        background = render.ppm_decode(feature_ppm)
    dets = []
    if preds_path:
        with open(preds_path) as fh:
            dets = [d for sid, d in kitti_io.parse_detections(fh.read())
                    if sid == scene_id]
    gt = [box for box, _ in scene.gt_boxes]
    return render.render_bev_boxes(grid_spec_of(cfg), gt, dets, iou_thr=iou_thr,
                                   background=background)


def synth_spec_of(cfg):
    return synth.SyntheticSceneSpec(
        n_objects={"Car": cfg.synth.n_cars, "Big-vehicle": cfg.synth.n_big_vehicles,
                   "Cyclist": cfg.synth.n_cyclists},
        image_height=cfg.image.height, image_width=cfg.image.width,
        camera_height_range=(cfg.synth.camera_height_min, cfg.synth.camera_height_max),
        pitch_range_deg=(cfg.synth.pitch_min_deg, cfg.synth.pitch_max_deg),
        focal_range=(cfg.synth.focal_min, cfg.synth.focal_max),
        x_extent=(cfg.bev.x_min, cfg.bev.x_max),
        y_extent=(cfg.bev.y_min, cfg.bev.y_max),
        noise_level=cfg.synth.noise_level)


def synthesize(cfg, out_dir, seed, count):
    os.makedirs(out_dir, exist_ok=True)
    return synth.generate_dataset(out_dir, seed, count, synth_spec_of(cfg))
