"""Pipeline configuration: nested dataclasses mirrored by flat dotted keys.

A config file is a flat JSON object like {"model.d_model": 32}; every CLI
flag overrides its corresponding key. Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .errors import ConfigError


@dataclass
class ImageConfig:
    height: int = 64
    width: int = 96


@dataclass
class ModelConfig:
    d_model: int = 32
    n_bins: int = 16
    h_min: float = -0.5
    h_max: float = 6.0
    dmsc_heads: int = 4
    dmsc_levels: int = 2
    dmsc_points: int = 4
    dmsc_enabled: bool = True
    cam_mod_hidden: int = 16


@dataclass
class BevConfig:
    x_min: float = 0.0
    x_max: float = 51.2
    y_min: float = -25.6
    y_max: float = 25.6
    resolution: float = 0.8
    patch_size: int = 4
    vpf_heads: int = 4
    vpf_depth: int = 1
    vpf_enabled: bool = True


@dataclass
class HeadConfig:
    score_thr: float = 0.1
    nms_iou: float = 0.2
    max_dets: int = 128


@dataclass
class TrainConfig:
    lr: float = 2e-4
    steps: int = 300
    batch_size: int = 4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    # auxiliary supervision of the height distribution from the scene height
    # maps (the desk-scale stand-in for LiDAR height ground truth); 0 disables
    height_loss_weight: float = 4.0


@dataclass
class SynthConfig:
    n_cars: int = 3
    n_big_vehicles: int = 1
    n_cyclists: int = 1
    camera_height_min: float = 4.0
    camera_height_max: float = 8.0
    pitch_min_deg: float = 5.0
    pitch_max_deg: float = 15.0
    focal_min: float = 170.0
    focal_max: float = 230.0
    noise_level: float = 0.02


@dataclass
class EvalConfig:
    iou_thr: float = 0.5
    fourth_component: str = "aas"


@dataclass
class PipelineConfig:
    image: ImageConfig = field(default_factory=ImageConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    bev: BevConfig = field(default_factory=BevConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    classes: tuple = ("Car", "Big-vehicle", "Cyclist")


def default_config():
    return PipelineConfig()


def config_to_flat(cfg):
    flat = {}
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            for sub in dataclasses.fields(value):
                flat[f"{f.name}.{sub.name}"] = getattr(value, sub.name)
        elif isinstance(value, tuple):
            flat[f.name] = list(value)
        else:
            flat[f.name] = value
    return flat


def apply_overrides(cfg, flat):
    """Return a new config with the flat dotted-key overrides applied."""
    if not flat:
        return cfg
    cfg = dataclasses.replace(cfg)
    for key, value in flat.items():
        if "." in key:
            section_name, field_name = key.split(".", 1)
        else:
            section_name, field_name = key, None
        if not hasattr(cfg, section_name):
            raise ConfigError(f"unknown config key {key!r}")
        if field_name is None:
            if section_name == "classes":
                setattr(cfg, "classes", tuple(value))
                continue
            raise ConfigError(f"config key {key!r} needs a dotted field")
        section = getattr(cfg, section_name)
        if not dataclasses.is_dataclass(section):
            raise ConfigError(f"unknown config key {key!r}")
        names = {f.name: f for f in dataclasses.fields(section)}
        if field_name not in names:
            raise ConfigError(f"unknown config key {key!r}")
        current = getattr(section, field_name)
        try:
            coerced = type(current)(value) if not isinstance(current, bool) else bool(value)
        except (TypeError, ValueError):
            raise ConfigError(f"bad value for {key!r}: {value!r}") from None
        new_section = dataclasses.replace(section, **{field_name: coerced})
        setattr(cfg, section_name, new_section)
    return cfg


def load_config(path=None, overrides=None):
    """Defaults, then file keys, then explicit overrides."""
    cfg = default_config()
    if path is not None:
        with open(path) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
        cfg = apply_overrides(cfg, doc)
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg
