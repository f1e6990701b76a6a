"""Image backbone, per-pixel height-bin prediction, and deformable fusion.

The backbone turns the input painting into a stride-4 feature map. A 1x1
head predicts a categorical distribution over height bins per pixel, and the
deformable multi-scale cross-attention block fuses those height features back
into the context features: each context pixel queries a few learned offset
locations on a height-feature pyramid and blends them with softmax weights.
With its offset/attention/output layers zero-initialized the block is an
exact identity on the context, so training starts from the plain pipeline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError
from .params import conv3x3_init, he_normal, linear_init, zeros


@dataclass(eq=False)
class FeatureMap:
    """A (C, H, W) tensor plus its downsample factor relative to the image."""

    data: Tensor
    stride: int

    def __post_init__(self):
        if self.data.data.ndim != 3:
            raise DimensionError(f"feature map must be (C, H, W), got {self.data.shape}")
        if self.stride < 1:
            raise ContractError(f"stride must be >= 1, got {self.stride}")

    @property
    def channels(self):
        return self.data.shape[0]

    @property
    def height(self):
        return self.data.shape[1]

    @property
    def width(self):
        return self.data.shape[2]


@dataclass(frozen=True)
class HeightBinSpec:
    """Uniform discretization of heights above the ground plane."""

    n_bins: int = 16
    h_min: float = -0.5
    h_max: float = 6.0

    def __post_init__(self):
        if self.n_bins < 2:
            raise ContractError(f"need at least 2 height bins, got {self.n_bins}")
        if not self.h_min < self.h_max:
            raise ContractError(f"empty height range [{self.h_min}, {self.h_max}]")

    def bin_center(self, i):
        if not 0 <= i < self.n_bins:
            raise IndexError(f"bin index {i} outside [0, {self.n_bins})")
        return self.h_min + (i + 0.5) * (self.h_max - self.h_min) / self.n_bins

    def centers(self):
        return np.array([self.bin_center(i) for i in range(self.n_bins)])


@dataclass(eq=False)
class HeightPrediction:
    """Per-pixel height-bin logits; softmax over axis 0 gives probabilities."""

    logits: Tensor  # (n_bins, Hf, Wf)
    spec: HeightBinSpec

    def __post_init__(self):
        if self.logits.data.ndim != 3 or self.logits.shape[0] != self.spec.n_bins:
            raise DimensionError(
                f"logits {self.logits.shape} inconsistent with {self.spec.n_bins} bins")

    def probabilities(self):
        return ad.softmax(self.logits, axis=0)


@dataclass(frozen=True)
class DmscConfig:
    n_heads: int = 4
    n_levels: int = 2
    n_points: int = 4
    d_model: int = 32

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ContractError(f"d_model {self.d_model} not divisible by {self.n_heads} heads")
        if self.n_levels < 1 or self.n_points < 1:
            raise ContractError("n_levels and n_points must be >= 1")


def conv1x1(x, weight, bias=None, output_scale=1.0):
    """Pointwise conv on a (C, H, W) tensor; weight is (C_out, C_in).

    ``output_scale`` is a fixed multiplier on the result. Because the
    adaptive optimizer moves each weight by about the learning rate per step
    regardless of gradient magnitude, the scale directly multiplies how fast
    the layer's output can change, without touching its initial distribution
    when the stored weights are scaled down to match.
    """
    c, h, w = x.shape
    flat = ad.reshape(x, (c, h * w))
    out = ad.matmul(weight, flat)
    if bias is not None:
        out = ad.add(out, ad.reshape(bias, (bias.shape[0], 1)))
    if output_scale != 1.0:
        out = ad.mul(out, Tensor(output_scale))
    return ad.reshape(out, (out.shape[0], h, w))


# ---------------------------------------------------------------------------
# parameter construction


HEIGHT_LOGIT_SCALE = 40.0


def init_backbone(rng, d_model, in_channels=3, gain=2.0):
    # gain > 1 keeps feature magnitudes useful to the heads under the short
    # optimizer budgets of desk-scale training
    mid = max(d_model // 2, 4)
    return {
        "backbone.conv1.weight": conv3x3_init(rng, mid, in_channels, gain=gain),
        "backbone.conv1.bias": zeros((mid,)),
        "backbone.conv2.weight": conv3x3_init(rng, d_model, mid, gain=gain),
        "backbone.conv2.bias": zeros((d_model,)),
    }


def init_height_net(rng, d_model, n_bins):
    # stored weights are divided by the fixed logit scale so initial logits
    # keep the plain He distribution while learning runs scale-times faster
    return {
        "height_net.proj.weight": linear_init(rng, n_bins, d_model,
                                              gain=1.0 / HEIGHT_LOGIT_SCALE),
        "height_net.proj.bias": zeros((n_bins,)),
    }


def init_camera_modulation(rng, d_model, hidden=16):
    return {
        "cam_mod.fc1.weight": linear_init(rng, hidden, 4),
        "cam_mod.fc1.bias": zeros((hidden,)),
        "cam_mod.fc2.weight": linear_init(rng, d_model, hidden),
        "cam_mod.fc2.bias": zeros((d_model,)),
    }


def init_dmsc(rng, cfg, n_bins):
    slots = cfg.n_heads * cfg.n_levels * cfg.n_points
    return {
        # value projection carries signal from the start; the offset,
        # attention, and output layers stay zero so the block begins as an
        # exact identity on the context features
        "dmsc.value_proj.weight": linear_init(rng, cfg.d_model, n_bins),
        "dmsc.value_proj.bias": zeros((cfg.d_model,)),
        "dmsc.offset.weight": zeros((slots * 2, cfg.d_model)),
        "dmsc.offset.bias": zeros((slots * 2,)),
        "dmsc.attn.weight": zeros((slots, cfg.d_model)),
        "dmsc.attn.bias": zeros((slots,)),
        "dmsc.out_proj.weight": zeros((cfg.d_model, cfg.d_model)),
        "dmsc.out_proj.bias": zeros((cfg.d_model,)),
    }


# ---------------------------------------------------------------------------
# forward passes


def backbone_forward(params, image):
    """Two stride-2 conv stages with ReLU; output stride 4, d_model channels."""
    if image.data.ndim != 3:
        raise DimensionError(f"image must be (3, H, W), got {image.shape}")
    _, hi, wi = image.shape
    if hi % 4 or wi % 4:
        raise DimensionError(f"image dims ({hi}, {wi}) must be divisible by 4")
    x = ad.conv2d(image, params["backbone.conv1.weight"], params["backbone.conv1.bias"],
                  stride=2, pad=1)
    x = ad.relu(x)
    x = ad.conv2d(x, params["backbone.conv2.weight"], params["backbone.conv2.bias"],
                  stride=2, pad=1)
    x = ad.relu(x)
    return FeatureMap(data=x, stride=4)


def height_net_forward(params, features, spec):
    """1x1 conv head mapping d_model channels to per-pixel bin logits."""
    weight = params["height_net.proj.weight"]
    if features.channels != weight.shape[1]:
        raise DimensionError(
            f"height net expects {weight.shape[1]} channels, got {features.channels}")
    logits = conv1x1(features.data, weight, params["height_net.proj.bias"],
                     output_scale=HEIGHT_LOGIT_SCALE)
    return HeightPrediction(logits=logits, spec=spec)


def camera_modulation(params, features, intrinsics):
    """Scale channels by a small MLP of the normalized intrinsics.

    Zero MLP weights give scale sigmoid(0)*2 = 1 everywhere, i.e. identity.
    """
    wi = features.width * features.stride
    hi = features.height * features.stride
    k_norm = ad.constant(np.array([[intrinsics.fx / wi, intrinsics.fy / hi,
                                    intrinsics.cx / wi, intrinsics.cy / hi]]))
    hidden = ad.relu(ad.linear(k_norm, params["cam_mod.fc1.weight"], params["cam_mod.fc1.bias"]))
    raw = ad.linear(hidden, params["cam_mod.fc2.weight"], params["cam_mod.fc2.bias"])
    scale = ad.mul(ad.sigmoid(raw), Tensor(2.0))  # bounded (0, 2)
    scale = ad.reshape(scale, (features.channels, 1, 1))
    return FeatureMap(data=ad.mul(features.data, scale), stride=features.stride)


def build_value_pyramid(params, height_pred, n_levels):
    """Project height logits to d_model channels, then halve n_levels-1 times."""
    if n_levels < 1:
        raise ContractError(f"n_levels must be >= 1, got {n_levels}")
    _, hf, wf = height_pred.logits.shape
    factor = 2 ** (n_levels - 1)
    if hf % factor or wf % factor:
        raise DimensionError(f"dims ({hf}, {wf}) not divisible by 2^{n_levels - 1}")
    base = conv1x1(height_pred.logits, params["dmsc.value_proj.weight"],
                   params["dmsc.value_proj.bias"])
    levels = [FeatureMap(data=base, stride=1)]
    for i in range(1, n_levels):
        pooled = ad.avg_pool2d(levels[-1].data)
        levels.append(FeatureMap(data=pooled, stride=2 ** i))
    return levels


def height_bin_targets(height_map, spec, stride):
    """Per-feature-pixel target bin indices from a full-resolution height map.

    Samples the map at feature-pixel centers and clips heights into the bin
    range, mirroring how a LiDAR-derived height ground truth would be
    discretized for supervision.
    """
    hi, wi = height_map.shape
    hf, wf = hi // stride, wi // stride
    centers = height_map[stride // 2::stride, stride // 2::stride][:hf, :wf]
    width = (spec.h_max - spec.h_min) / spec.n_bins
    bins = np.floor((centers - spec.h_min) / width).astype(np.int64)
    return np.clip(bins, 0, spec.n_bins - 1)


def height_loss(pred, target_bins, pixel_weights=None):
    """Weighted mean cross-entropy between predicted bins and targets.

    ``pixel_weights`` rebalances the loss toward the rare object pixels;
    omitted, every pixel counts equally.
    """
    n_bins, hf, wf = pred.logits.shape
    if target_bins.shape != (hf, wf):
        raise DimensionError(f"height targets {target_bins.shape} vs ({hf}, {wf})")
    weights = np.ones((hf, wf)) if pixel_weights is None else pixel_weights
    one_hot = np.zeros((n_bins, hf, wf))
    ii, jj = np.meshgrid(np.arange(hf), np.arange(wf), indexing="ij")
    one_hot[target_bins, ii, jj] = weights
    probs = ad.clip(pred.probabilities(), 1e-12, 1.0)
    picked = ad.mul(ad.constant(one_hot), ad.log(probs))
    return ad.mul(ad.tsum(picked), Tensor(-1.0 / weights.sum()))


def _reference_points(hf, wf):
    ii, jj = np.meshgrid(np.arange(hf), np.arange(wf), indexing="ij")
    return np.stack([(jj.ravel() + 0.5) / wf, (ii.ravel() + 0.5) / hf], axis=1)


def dmsc_forward(params, context, height_pred, cfg, attention_sink=None):
    """Deformable multi-scale cross-attention from context onto height features.

    Per pixel, each head predicts n_levels*n_points sampling offsets (in
    normalized [0,1] units, scaled by each level's size) and attention logits
    from the context query; the softmax-weighted bilinear samples of the
    height pyramid are merged, projected, and added residually to the context.
    Passing a list as ``attention_sink`` collects one (N, n_levels*n_points)
    weight array per head, for inspection.
    """
    if context.channels != cfg.d_model:
        raise DimensionError(
            f"context has {context.channels} channels, config wants {cfg.d_model}")
    c, hf, wf = context.data.shape
    n_q = hf * wf
    heads, n_levels, n_points = cfg.n_heads, cfg.n_levels, cfg.n_points
    head_dim = cfg.d_model // heads
    lp = n_levels * n_points

    pyramid = build_value_pyramid(params, height_pred, n_levels)
    queries = ad.transpose(ad.reshape(context.data, (c, n_q)), (1, 0))  # (N, C)
    offsets = ad.linear(queries, params["dmsc.offset.weight"], params["dmsc.offset.bias"])
    logits = ad.linear(queries, params["dmsc.attn.weight"], params["dmsc.attn.bias"])

    ref = _reference_points(hf, wf)
    ref_rep = ad.constant(np.repeat(ref, n_points, axis=0))  # (N*P, 2)

    head_outputs = []
    for h in range(heads):
        weights = ad.softmax(ad.narrow(logits, 1, h * lp, lp), axis=1)  # (N, L*P)
        if attention_sink is not None:
            attention_sink.append(np.array(weights.data))
        acc = None
        for lvl in range(n_levels):
            level = pyramid[lvl]
            lh, lw = level.height, level.width
            value = ad.narrow(level.data, 0, h * head_dim, head_dim)
            off = ad.reshape(
                ad.narrow(offsets, 1, (h * n_levels + lvl) * n_points * 2, n_points * 2),
                (n_q * n_points, 2))
            loc = ad.add(ad.mul(ad.add(off, ref_rep),
                                ad.constant(np.array([float(lw), float(lh)]))),
                         ad.constant(np.array([-0.5, -0.5])))
            samples = ad.bilinear_sample(value, loc)  # (N*P, head_dim)
            w_lvl = ad.reshape(ad.narrow(weights, 1, lvl * n_points, n_points),
                               (n_q * n_points, 1))
            summed = ad.tsum(ad.reshape(ad.mul(samples, w_lvl), (n_q, n_points, head_dim)),
                             axis=1)
            acc = summed if acc is None else ad.add(acc, summed)
        head_outputs.append(acc)

    merged = ad.concat(head_outputs, axis=1)  # (N, C)
    projected = ad.linear(merged, params["dmsc.out_proj.weight"], params["dmsc.out_proj.bias"])
    update = ad.reshape(ad.transpose(projected, (1, 0)), (c, hf, wf))
    return FeatureMap(data=ad.add(context.data, update), stride=context.stride)
