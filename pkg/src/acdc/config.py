"""Declarative run configuration shared by the CLI subcommands.

A config file (YAML or JSON) holds one mapping per section; keys mirror the
dataclass fields below. Command-line flags override file values.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import yaml

from .baseline import LifecycleParams, NoisyOracleDetectorConfig
from .dataset import AugmentationPolicy
from .errors import ConfigError
from .geometry import CameraIntrinsics
from .model import NetworkConfig
from .sim import SynthConfig
from .training import TrainConfig


@dataclass
class CameraSection:
    fov_width: int = 320
    fov_height: int = 240
    angle_of_view_x: float = 60.0
    angle_of_view_y: float = 45.0

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.fov_width, self.fov_height, self.angle_of_view_x, self.angle_of_view_y)


@dataclass
class DatasetSection:
    n_samples: int = 3100
    train_fraction: float = 0.75
    histogram_bins: int = 10


@dataclass
class EvalSection:
    test_samples: int = 500
    seeds: Optional[Tuple[int, ...]] = None  # None: use the global seed
    # None centres the FoV in the world
    start_x: Optional[int] = None
    start_y: Optional[int] = None
    workers: int = 1
    series_window: int = 10


@dataclass
class BenchSection:
    n_frames: int = 50
    repeats: int = 3


@dataclass
class RunConfig:
    seed: int = 0
    camera: CameraSection = field(default_factory=CameraSection)
    synth: SynthConfig = field(default_factory=lambda: SynthConfig(world_width=768, world_height=576,
                                                                   min_size=(28, 56), max_size=(48, 96),
                                                                   max_speed=12.0))
    dataset: DatasetSection = field(default_factory=DatasetSection)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augmentation: AugmentationPolicy = field(default_factory=AugmentationPolicy)
    detector: NoisyOracleDetectorConfig = field(default_factory=NoisyOracleDetectorConfig)
    lifecycle: LifecycleParams = field(default_factory=LifecycleParams)
    eval: EvalSection = field(default_factory=EvalSection)
    bench: BenchSection = field(default_factory=BenchSection)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))


def desk_overrides() -> Dict[str, Dict[str, Any]]:
    """Half-resolution settings that train on a laptop CPU."""
    return {
        "camera": {"fov_width": 160, "fov_height": 120},
        "synth": {"world_width": 384, "world_height": 288, "min_size": (14, 28),
                  "max_size": (24, 48), "max_speed": 6.0},
        "network": {"input_width": 160, "input_height": 120},
        "dataset": {"n_samples": 500},
        "train": {"epochs": 100},
        "augmentation": {"translate_max": 16},
    }


def _coerce(current, value):
    if is_dataclass(current) and isinstance(value, dict):
        return _apply(current, value)
    if isinstance(current, tuple) and isinstance(value, (list, tuple)):
        return tuple(tuple(v) if isinstance(v, list) else v for v in value)
    return value


def _apply(obj, updates: Dict[str, Any]):
    known = {f.name for f in fields(obj)}
    for key, value in updates.items():
        if key not in known:
            raise ConfigError(f"unknown setting {type(obj).__name__}.{key}")
        setattr(obj, key, _coerce(getattr(obj, key), value))
    if hasattr(obj, "__post_init__") and not isinstance(obj, RunConfig):
        obj.__post_init__()
    return obj


def apply_overrides(cfg: RunConfig, overrides: Dict[str, Any]) -> RunConfig:
    return _apply(cfg, overrides)


def load_run_config(path: Optional[str] = None, preset: str = "full") -> RunConfig:
    cfg = RunConfig()
    if preset == "desk":
        apply_overrides(cfg, desk_overrides())
    elif preset != "full":
        raise ConfigError(f"unknown preset {preset!r}")
    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            data = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {p}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{p} must hold a mapping of sections")
        apply_overrides(cfg, data)
    return cfg


def write_snapshot(cfg: RunConfig, directory, extra: Optional[dict] = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    payload = {"run_config": cfg.to_dict(), **(extra or {})}
    path = directory / "run_config.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path
