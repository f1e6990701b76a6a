"""Oriented 3D box and detection containers."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import ContractError


def normalize_yaw(theta):
    """Wrap an angle into (-pi, pi]; exact for values already in range."""
    theta = float(theta)
    if -math.pi < theta <= math.pi:
        return theta
    wrapped = math.fmod(theta + math.pi, 2.0 * math.pi)
    if wrapped <= 0.0:
        wrapped += 2.0 * math.pi
    return wrapped - math.pi


@dataclass(frozen=True)
class Box3D:
    """Seven-parameter oriented box: center, dimensions, yaw about ego z."""

    cx: float
    cy: float
    cz: float
    length: float
    width: float
    height: float
    yaw: float

    def __post_init__(self):
        for name in ("cx", "cy", "cz", "length", "width", "height", "yaw"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if min(self.length, self.width, self.height) <= 0:
            raise ContractError(
                f"box dims must be positive: {self.length} x {self.width} x {self.height}")
        if not -math.pi < self.yaw <= math.pi:
            raise ContractError(f"yaw {self.yaw} outside (-pi, pi]")

    def volume(self):
        return self.length * self.width * self.height

    def z_interval(self):
        return self.cz - self.height / 2.0, self.cz + self.height / 2.0

    def as_list(self):
        return [self.cx, self.cy, self.cz, self.length, self.width, self.height, self.yaw]

    @staticmethod
    def from_list(values):
        cx, cy, cz, length, width, height, yaw = (float(v) for v in values)
        return Box3D(cx, cy, cz, length, width, height, normalize_yaw(yaw))


@dataclass(frozen=True)
class Detection:
    box: Box3D
    class_name: str
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ContractError(f"score {self.score} outside [0, 1]")
