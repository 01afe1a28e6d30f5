"""Pinhole pan-tilt camera model.

Controls are expressed as normalized pixel displacements ``u = d / I`` between
the FoV centre and the centre of mass of the visible targets; servo angles
follow by scaling with half the angle of view.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Tuple

from .errors import InvalidInputError

Point = Tuple[float, float]


@dataclass(frozen=True)
class CameraIntrinsics:
    fov_width: int = 320
    fov_height: int = 240
    angle_of_view_x: float = 60.0
    angle_of_view_y: float = 45.0

    def __post_init__(self):
        if self.fov_width <= 0 or self.fov_height <= 0:
            raise InvalidInputError(f"FoV size must be positive, got {self.fov_width}x{self.fov_height}")
        for name in ("angle_of_view_x", "angle_of_view_y"):
            v = getattr(self, name)
            if not (0 < v <= 180):
                raise InvalidInputError(f"{name} must lie in (0, 180], got {v}")

    @property
    def size(self) -> Tuple[int, int]:
        return (self.fov_width, self.fov_height)


@dataclass(frozen=True)
class CameraState:
    """Top-left corner of the FoV in world pixel coordinates."""

    fov_origin_x: int = 0
    fov_origin_y: int = 0

    def clamped(self, world_size: Tuple[int, int], intr: CameraIntrinsics) -> "CameraState":
        max_x = world_size[0] - intr.fov_width
        max_y = world_size[1] - intr.fov_height
        if max_x < 0 or max_y < 0:
            raise InvalidInputError(f"world {world_size} smaller than FoV {intr.size}")
        return CameraState(min(max(int(self.fov_origin_x), 0), max_x),
                           min(max(int(self.fov_origin_y), 0), max_y))

    def center(self, intr: CameraIntrinsics) -> Point:
        return (self.fov_origin_x + intr.fov_width / 2.0,
                self.fov_origin_y + intr.fov_height / 2.0)


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def validate(self) -> "BoundingBox":
        vals = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(v) for v in vals):
            raise InvalidInputError(f"non-finite box {vals}")
        if self.x_min >= self.x_max or self.y_min >= self.y_max:
            raise InvalidInputError(f"malformed box {vals}: min must be below max")
        return self

    @property
    def center(self) -> Point:
        return ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    def translated(self, dx: float, dy: float) -> "BoundingBox":
        return BoundingBox(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)

    def clipped(self, width: float, height: float) -> "BoundingBox":
        return BoundingBox(max(self.x_min, 0), max(self.y_min, 0),
                           min(self.x_max, width), min(self.y_max, height))

    def mirrored_x(self, width: float) -> "BoundingBox":
        return BoundingBox(width - self.x_max, self.y_min, width - self.x_min, self.y_max)

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)


@dataclass(frozen=True)
class ControlLabel:
    u_x: float = 0.0
    u_y: float = 0.0
    count: float = 0.0

    def validate(self) -> "ControlLabel":
        if not (-1.0 <= self.u_x <= 1.0 and -1.0 <= self.u_y <= 1.0):
            raise InvalidInputError(f"label displacement out of [-1, 1]: ({self.u_x}, {self.u_y})")
        if not self.count >= 0:
            raise InvalidInputError(f"negative target count {self.count}")
        return self

    def as_tuple(self) -> Tuple[float, float, float]:
        return (self.u_x, self.u_y, self.count)


@dataclass(frozen=True)
class ServoAction:
    pan: float
    tilt: float


def center_of_mass(boxes: Iterable[BoundingBox]) -> Optional[Point]:
    """Unweighted mean of box centres, or ``None`` for an empty list."""
    boxes = list(boxes)
    if not boxes:
        return None
    sx = sy = 0.0
    for b in boxes:
        cx, cy = b.validate().center
        sx += cx
        sy += cy
    return (sx / len(boxes), sy / len(boxes))


def center_in_fov(box: BoundingBox, camera: CameraState, intr: CameraIntrinsics) -> bool:
    cx, cy = box.center
    return (camera.fov_origin_x < cx < camera.fov_origin_x + intr.fov_width
            and camera.fov_origin_y < cy < camera.fov_origin_y + intr.fov_height)


def label_from_local_boxes(boxes: Sequence[BoundingBox], intr: CameraIntrinsics) -> ControlLabel:
    """Label for boxes already expressed in FoV-local coordinates."""
    if not boxes:
        return ControlLabel(0.0, 0.0, 0.0)
    # summing offsets from the FoV centre (not raw centres) keeps mirrored
    # configurations exactly sign-symmetric in floating point
    half_w, half_h = intr.fov_width / 2.0, intr.fov_height / 2.0
    sx = sy = 0.0
    for b in boxes:
        cx, cy = b.validate().center
        sx += cx - half_w
        sy += cy - half_h
    n = len(boxes)
    return ControlLabel(sx / n / intr.fov_width, sy / n / intr.fov_height, float(n))


def expert_label(camera: CameraState, intr: CameraIntrinsics,
                 world_boxes: Iterable[BoundingBox]) -> ControlLabel:
    """Control that moves the FoV centre onto the centre of mass of the visible targets.

    Visibility is decided on the true (unclipped) box centres and the centre of
    mass uses those same centres, so the resulting label always lies in
    [-0.5, 0.5] on both axes. An empty FoV yields ``(0, 0, 0)``.
    """
    visible = [b.validate() for b in world_boxes]
    visible = [b for b in visible if center_in_fov(b, camera, intr)]
    local = [b.translated(-camera.fov_origin_x, -camera.fov_origin_y) for b in visible]
    return label_from_local_boxes(local, intr)


def _check_range(label: ControlLabel) -> None:
    if not (abs(label.u_x) <= 1.0 and abs(label.u_y) <= 1.0):
        raise InvalidInputError(f"label displacement out of [-1, 1]: ({label.u_x}, {label.u_y})")


def label_to_angles(label: ControlLabel, intr: CameraIntrinsics) -> ServoAction:
    _check_range(label)
    return ServoAction(pan=label.u_x * intr.angle_of_view_x / 2.0,
                       tilt=label.u_y * intr.angle_of_view_y / 2.0)


def label_to_pixel_shift(label: ControlLabel, intr: CameraIntrinsics) -> Tuple[float, float]:
    return (label.u_x * intr.fov_width, label.u_y * intr.fov_height)
