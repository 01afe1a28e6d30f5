"""Reference policies: ground-truth expert and fixed-output floors."""
from __future__ import annotations

from .geometry import ControlLabel, label_from_local_boxes


class ExpertController:
    """Ground-truth motion: centres the visible targets using perfectly known positions."""

    name = "expert"

    def reset(self, seed=None):
        pass

    def __call__(self, observation, info) -> ControlLabel:
        return label_from_local_boxes(info.target_boxes, info.intrinsics)


class ConstantController:
    def __init__(self, label: ControlLabel = ControlLabel(), name: str = "constant"):
        self.label = label
        self.name = name

    def reset(self, seed=None):
        pass

    def __call__(self, observation, info=None) -> ControlLabel:
        return self.label


def static_controller() -> ConstantController:
    """Never moves and always reports zero targets."""
    return ConstantController(ControlLabel(0.0, 0.0, 0.0), name="static")


def mean_count_controller(mean_count: float) -> ConstantController:
    return ConstantController(ControlLabel(0.0, 0.0, float(mean_count)), name="mean_count")
