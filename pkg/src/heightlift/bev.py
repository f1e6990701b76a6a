"""Voxel pooling into a BEV grid and the patch self-attention refiner.

Pooling scatter-sums point features into pillars (the vertical axis is
collapsed), which keeps it linear: pooling a union of clouds equals the sum
of the pooled grids. The refiner patchifies the grid, runs one or more
pre-norm attention + MLP blocks over the patch tokens, and inverts the
patching. All residual branch outputs are zero at initialization, so the
refined grid starts bit-identical to the pooled grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError
from .params import linear_init, zeros


@dataclass(frozen=True)
class BevGridSpec:
    """Metric extent and resolution of the bird's-eye-view grid (ego frame)."""

    x_min: float = 0.0
    x_max: float = 51.2
    y_min: float = -25.6
    y_max: float = 25.6
    resolution: float = 0.8
    channels: int = 32

    def __post_init__(self):
        for lo, hi, name in ((self.x_min, self.x_max, "x"), (self.y_min, self.y_max, "y")):
            span = hi - lo
            if span <= 0:
                raise ContractError(f"empty {name} extent [{lo}, {hi}]")
            cells = span / self.resolution
            if abs(cells - round(cells)) > 1e-9:
                raise ContractError(
                    f"{name} extent {span} is not a multiple of resolution {self.resolution}")

    @property
    def cells_x(self):
        return int(round((self.x_max - self.x_min) / self.resolution))

    @property
    def cells_y(self):
        return int(round((self.y_max - self.y_min) / self.resolution))


@dataclass(eq=False)
class BevFeatureMap:
    spec: BevGridSpec
    data: Tensor  # (C, cells_y, cells_x)

    def __post_init__(self):
        expected = (self.spec.channels, self.spec.cells_y, self.spec.cells_x)
        if tuple(self.data.shape) != expected:
            raise DimensionError(f"BEV data {self.data.shape} != spec shape {expected}")


@dataclass(eq=False)
class PatchSequence:
    """Flattened square patches of a BEV map, plus what depatchify needs."""

    tokens: Tensor  # (n_patches, C * patch_size**2)
    patch_size: int
    channels: int
    cells_y: int
    cells_x: int

    @property
    def n_patches(self):
        return self.tokens.shape[0]

    @property
    def patch_dim(self):
        return self.tokens.shape[1]


@dataclass(frozen=True)
class VpfConfig:
    patch_size: int = 4
    n_heads: int = 4
    depth: int = 1

    def __post_init__(self):
        if self.patch_size < 1 or self.depth < 1 or self.n_heads < 1:
            raise ContractError("patch_size, depth, and n_heads must be >= 1")


def voxel_pool(cloud, spec):
    """Sum point features into BEV pillars; out-of-extent points are dropped.

    Accumulation per cell follows point order, so the result is bit-identical
    to a sequential per-point scatter loop.
    """
    if cloud.features.shape[1] != spec.channels:
        raise DimensionError(
            f"cloud has {cloud.features.shape[1]} channels, grid wants {spec.channels}")
    n_cells = spec.cells_y * spec.cells_x
    if len(cloud) == 0:
        return BevFeatureMap(
            spec=spec,
            data=ad.constant(np.zeros((spec.channels, spec.cells_y, spec.cells_x))))
    ix = np.floor((cloud.xyz[:, 0] - spec.x_min) / spec.resolution).astype(np.int64)
    iy = np.floor((cloud.xyz[:, 1] - spec.y_min) / spec.resolution).astype(np.int64)
    inside = (ix >= 0) & (ix < spec.cells_x) & (iy >= 0) & (iy < spec.cells_y)
    keep = np.nonzero(inside)[0]
    feats = ad.gather_rows(cloud.features, keep)
    flat_idx = iy[keep] * spec.cells_x + ix[keep]
    pooled = ad.scatter_sum(feats, flat_idx, n_cells)  # (cells, C)
    grid = ad.transpose(ad.reshape(pooled, (spec.cells_y, spec.cells_x, spec.channels)),
                        (2, 0, 1))
    return BevFeatureMap(spec=spec, data=grid)


def patchify(bev, patch_size):
    """Cut the grid into row-major square patches; exact inverse exists."""
    c, cy, cx = bev.data.shape
    if cy % patch_size or cx % patch_size:
        raise DimensionError(f"grid ({cy}, {cx}) not divisible by patch size {patch_size}")
    ny, nx = cy // patch_size, cx // patch_size
    blocks = ad.reshape(bev.data, (c, ny, patch_size, nx, patch_size))
    tokens = ad.reshape(ad.transpose(blocks, (1, 3, 0, 2, 4)),
                        (ny * nx, c * patch_size * patch_size))
    return PatchSequence(tokens=tokens, patch_size=patch_size, channels=c,
                         cells_y=cy, cells_x=cx)


def depatchify(seq, spec):
    ps = seq.patch_size
    c, cy, cx = seq.channels, seq.cells_y, seq.cells_x
    ny, nx = cy // ps, cx // ps
    blocks = ad.reshape(seq.tokens, (ny, nx, c, ps, ps))
    data = ad.reshape(ad.transpose(blocks, (2, 0, 3, 1, 4)), (c, cy, cx))
    return BevFeatureMap(spec=spec, data=data)


def init_vpf(rng, spec, cfg):
    """Attention/MLP blocks over patch tokens; residual outputs start at zero."""
    if spec.cells_y % cfg.patch_size or spec.cells_x % cfg.patch_size:
        raise DimensionError(
            f"grid ({spec.cells_y}, {spec.cells_x}) not divisible by patch {cfg.patch_size}")
    d = spec.channels * cfg.patch_size ** 2
    if d % cfg.n_heads:
        raise ContractError(f"patch dim {d} not divisible by {cfg.n_heads} heads")
    n_patches = (spec.cells_y // cfg.patch_size) * (spec.cells_x // cfg.patch_size)
    hidden = 4 * d
    params = {"vpf.pos_embed": zeros((n_patches, d))}
    for b in range(cfg.depth):
        p = f"vpf.block{b}"
        params.update({
            f"{p}.ln1.gamma": Tensor(np.ones(d), requires_grad=True),
            f"{p}.ln1.beta": zeros((d,)),
            f"{p}.q.weight": linear_init(rng, d, d),
            f"{p}.q.bias": zeros((d,)),
            f"{p}.k.weight": linear_init(rng, d, d),
            f"{p}.k.bias": zeros((d,)),
            f"{p}.v.weight": linear_init(rng, d, d),
            f"{p}.v.bias": zeros((d,)),
            f"{p}.o.weight": zeros((d, d)),
            f"{p}.o.bias": zeros((d,)),
            f"{p}.ln2.gamma": Tensor(np.ones(d), requires_grad=True),
            f"{p}.ln2.beta": zeros((d,)),
            f"{p}.mlp1.weight": linear_init(rng, hidden, d),
            f"{p}.mlp1.bias": zeros((hidden,)),
            f"{p}.mlp2.weight": zeros((d, hidden)),
            f"{p}.mlp2.bias": zeros((d,)),
        })
    return params


def mhsa_block(seq, params, n_heads, prefix="vpf.block0", pos_embed=None,
               attention_sink=None):
    """Pre-norm multi-head self-attention + MLP over patch tokens.

    tokens t: u = t + pos; y = u + MHSA(LN(u)); z = y + MLP(LN(y)).
    Attention is scaled dot-product per head (scale 1 / sqrt(head_dim)).
    Passing a list as ``attention_sink`` collects one (T, T) weight array
    per head.
    """
    d = seq.patch_dim
    if d % n_heads:
        raise ContractError(f"patch dim {d} not divisible by {n_heads} heads")
    head_dim = d // n_heads
    u = seq.tokens if pos_embed is None else ad.add(seq.tokens, pos_embed)

    x = ad.layer_norm(u, params[f"{prefix}.ln1.gamma"], params[f"{prefix}.ln1.beta"])
    q = ad.linear(x, params[f"{prefix}.q.weight"], params[f"{prefix}.q.bias"])
    k = ad.linear(x, params[f"{prefix}.k.weight"], params[f"{prefix}.k.bias"])
    v = ad.linear(x, params[f"{prefix}.v.weight"], params[f"{prefix}.v.bias"])
    head_outs = []
    scale = Tensor(1.0 / np.sqrt(head_dim))
    for h in range(n_heads):
        qh = ad.narrow(q, 1, h * head_dim, head_dim)
        kh = ad.narrow(k, 1, h * head_dim, head_dim)
        vh = ad.narrow(v, 1, h * head_dim, head_dim)
        scores = ad.mul(ad.matmul(qh, ad.transpose(kh, (1, 0))), scale)
        attn = ad.softmax(scores, axis=1)
        if attention_sink is not None:
            attention_sink.append(np.array(attn.data))
        head_outs.append(ad.matmul(attn, vh))
    merged = ad.concat(head_outs, axis=1)
    y = ad.add(u, ad.linear(merged, params[f"{prefix}.o.weight"], params[f"{prefix}.o.bias"]))

    x2 = ad.layer_norm(y, params[f"{prefix}.ln2.gamma"], params[f"{prefix}.ln2.beta"])
    hidden = ad.relu(ad.linear(x2, params[f"{prefix}.mlp1.weight"], params[f"{prefix}.mlp1.bias"]))
    z = ad.add(y, ad.linear(hidden, params[f"{prefix}.mlp2.weight"], params[f"{prefix}.mlp2.bias"]))
    return PatchSequence(tokens=z, patch_size=seq.patch_size, channels=seq.channels,
                         cells_y=seq.cells_y, cells_x=seq.cells_x)


def vpf_forward(params, pooled, cfg):
    """Patchify -> attention blocks -> depatchify; shape preserved."""
    seq = patchify(pooled, cfg.patch_size)
    pos = params["vpf.pos_embed"]
    if tuple(pos.shape) != (seq.n_patches, seq.patch_dim):
        raise DimensionError(
            f"pos_embed {pos.shape} vs sequence ({seq.n_patches}, {seq.patch_dim})")
    for b in range(cfg.depth):
        seq = mhsa_block(seq, params, cfg.n_heads, prefix=f"vpf.block{b}",
                         pos_embed=pos if b == 0 else None)
    return depatchify(seq, pooled.spec)
