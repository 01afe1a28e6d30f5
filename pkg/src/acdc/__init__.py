"""Active camera control: simulation, imitation datasets, ACDCNet and a tracking baseline."""

from .geometry import (
    BoundingBox,
    CameraIntrinsics,
    CameraState,
    ControlLabel,
    ServoAction,
    center_of_mass,
    expert_label,
    label_to_angles,
    label_to_pixel_shift,
)

__version__ = "0.1.0"

__all__ = [
    "BoundingBox",
    "CameraIntrinsics",
    "CameraState",
    "ControlLabel",
    "ServoAction",
    "center_of_mass",
    "expert_label",
    "label_to_angles",
    "label_to_pixel_shift",
]
