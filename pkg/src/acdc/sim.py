"""Virtual pan-tilt camera moving a fixed-size FoV over larger annotated frames."""
from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import List, Optional, Protocol, Sequence, Tuple

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigError, InvalidInputError, LoadError
from .geometry import (
    BoundingBox,
    CameraIntrinsics,
    CameraState,
    ControlLabel,
    center_in_fov,
    expert_label,
    label_to_pixel_shift,
)

log = logging.getLogger(__name__)

ANNOTATION_FILE = "annotations.jsonl"
META_FILE = "sequence.json"


class FrameSequence:
    """Ordered annotated frames sharing one world size.

    Images are either held in memory or read lazily from disk through a small
    LRU cache, so long on-disk sequences never load all at once.
    """

    def __init__(self, annotations, world_size, images=None, image_paths=None,
                 frame_rate=7.0, sequence_id="sequence"):
        if (images is None) == (image_paths is None):
            raise InvalidInputError("give exactly one of images or image_paths")
        self.annotations: Tuple[Tuple[BoundingBox, ...], ...] = tuple(tuple(a) for a in annotations)
        self.world_width, self.world_height = int(world_size[0]), int(world_size[1])
        self.frame_rate = float(frame_rate)
        self.sequence_id = str(sequence_id)
        self._images = None if images is None else tuple(images)
        self._paths = None if image_paths is None else tuple(str(p) for p in image_paths)
        n = len(self._images if self._images is not None else self._paths)
        if n != len(self.annotations):
            raise InvalidInputError(f"{n} images but {len(self.annotations)} annotation records")
        if self._paths is not None:
            self._read = lru_cache(maxsize=32)(self._read_path)

    def __len__(self):
        return len(self.annotations)

    @property
    def world_size(self) -> Tuple[int, int]:
        return (self.world_width, self.world_height)

    def _read_path(self, index):
        img = np.asarray(Image.open(self._paths[index]).convert("RGB"))
        if img.shape[:2] != (self.world_height, self.world_width):
            raise LoadError(f"frame {index} ({self._paths[index]}) has size "
                            f"{img.shape[1]}x{img.shape[0]}, expected {self.world_width}x{self.world_height}")
        img.setflags(write=False)
        return img

    def image(self, index: int) -> np.ndarray:
        if self._images is not None:
            return self._images[index]
        return self._read(index)


@dataclass(frozen=True)
class TargetSpec:
    """Explicit initial placement for one synthetic target (top-left corner)."""

    x: float
    y: float
    vx: float
    vy: float
    width: int
    height: int
    color: Tuple[int, int, int] = (230, 40, 40)


@dataclass
class SynthConfig:
    world_width: int = 384
    world_height: int = 288
    n_targets: int = 5
    n_frames: int = 200
    min_size: Tuple[int, int] = (14, 28)
    max_size: Tuple[int, int] = (24, 48)
    max_speed: float = 6.0
    texture_level: float = 25.0
    noise_level: float = 4.0
    frame_rate: float = 7.0
    sequence_id: str = "synthetic"
    targets: Optional[List[TargetSpec]] = None

    def validate(self):
        if self.world_width <= 0 or self.world_height <= 0 or self.n_frames < 1:
            raise ConfigError("world size and frame count must be positive")
        if self.targets is not None:
            sizes = [(t.width, t.height) for t in self.targets]
        else:
            if self.n_targets < 0:
                raise ConfigError("n_targets must be non-negative")
            if any(lo > hi or lo < 1 for lo, hi in zip(self.min_size, self.max_size)):
                raise ConfigError(f"bad target size range {self.min_size}..{self.max_size}")
            sizes = [self.max_size]
        for w, h in sizes:
            if w > self.world_width or h > self.world_height:
                raise ConfigError(f"target {w}x{h} does not fit a "
                                  f"{self.world_width}x{self.world_height} world")
        return self


_PALETTE = np.array([
    (230, 40, 40), (40, 200, 60), (50, 90, 240), (240, 220, 40), (230, 60, 220),
    (40, 220, 230), (250, 140, 20), (255, 255, 255),
], dtype=np.uint8)


def reflect(p, span):
    """Fold an unbounded coordinate into [0, span] by mirror reflection at both ends."""
    if span <= 0:
        return np.zeros_like(p, dtype=float)
    f = np.mod(p, 2.0 * span)
    return np.where(f <= span, f, 2.0 * span - f)


def _round_half_up(v):
    return np.floor(np.asarray(v, dtype=float) + 0.5).astype(int)


def synthesize_sequence(config: SynthConfig, seed: int = 0) -> FrameSequence:
    """Render coloured rectangles moving at constant velocity over a textured background."""
    config.validate()
    rng = np.random.default_rng(seed)
    W, H = config.world_width, config.world_height

    if config.targets is not None:
        specs = list(config.targets)
    else:
        specs = []
        for k in range(config.n_targets):
            w = int(rng.integers(config.min_size[0], config.max_size[0] + 1))
            h = int(rng.integers(config.min_size[1], config.max_size[1] + 1))
            speed = rng.uniform(0.3, 1.0) * config.max_speed
            angle = rng.uniform(0, 2 * np.pi)
            specs.append(TargetSpec(
                x=float(rng.uniform(0, W - w)), y=float(rng.uniform(0, H - h)),
                vx=float(speed * np.cos(angle)), vy=float(speed * np.sin(angle)),
                width=w, height=h, color=tuple(int(c) for c in _PALETTE[k % len(_PALETTE)]),
            ))

    base = rng.normal(0.0, 1.0, size=(H, W, 3))
    base = ndimage.gaussian_filter(base, sigma=(6, 6, 0))
    base = base / (base.std() + 1e-12) * config.texture_level + np.array([90.0, 95.0, 85.0])

    t = np.arange(config.n_frames, dtype=float)
    tracks = []
    for s in specs:
        xs = _round_half_up(reflect(s.x + s.vx * t, W - s.width))
        ys = _round_half_up(reflect(s.y + s.vy * t, H - s.height))
        tracks.append((xs, ys, s))

    images, annotations = [], []
    for i in range(config.n_frames):
        frame = base + rng.normal(0.0, config.noise_level, size=base.shape) if config.noise_level > 0 else base.copy()
        frame = np.clip(frame, 0, 255)
        boxes = []
        for xs, ys, s in tracks:
            x0, y0 = int(xs[i]), int(ys[i])
            frame[y0:y0 + s.height, x0:x0 + s.width] = s.color
            boxes.append(BoundingBox(x0, y0, x0 + s.width, y0 + s.height))
        img = np.rint(frame).astype(np.uint8)
        img.setflags(write=False)
        images.append(img)
        annotations.append(boxes)
    return FrameSequence(annotations, (W, H), images=images,
                         frame_rate=config.frame_rate, sequence_id=config.sequence_id)


def write_sequence(seq: FrameSequence, directory) -> Path:
    directory = Path(directory)
    (directory / "frames").mkdir(parents=True, exist_ok=True)
    lines = []
    for i in range(len(seq)):
        rel = f"frames/{i:06d}.png"
        Image.fromarray(np.asarray(seq.image(i))).save(directory / rel)
        boxes = [[int(v) if float(v).is_integer() else float(v) for v in b.as_tuple()]
                 for b in seq.annotations[i]]
        lines.append(json.dumps({"frame": i, "image": rel, "boxes": boxes}))
    (directory / ANNOTATION_FILE).write_text("\n".join(lines) + "\n")
    meta = {"sequence_id": seq.sequence_id, "frame_rate": seq.frame_rate,
            "world_width": seq.world_width, "world_height": seq.world_height}
    (directory / META_FILE).write_text(json.dumps(meta, indent=2) + "\n")
    return directory


def load_sequence(source) -> FrameSequence:
    """Read a sequence directory (or its annotation file).

    Each line of the annotation file is ``{"frame": i, "image": path,
    "boxes": [[x_min, y_min, x_max, y_max], ...]}`` with image paths relative
    to the file.
    """
    source = Path(source)
    ann_path = source / ANNOTATION_FILE if source.is_dir() else source
    root = ann_path.parent
    if not ann_path.exists():
        raise LoadError(f"annotation file not found: {ann_path}")
    meta = {}
    if (root / META_FILE).exists():
        meta = json.loads((root / META_FILE).read_text())

    records = {}
    for lineno, line in enumerate(ann_path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        where = f"{ann_path}:{lineno}"
        try:
            rec = json.loads(line)
            idx = int(rec["frame"])
            img = str(rec["image"])
            raw_boxes = rec["boxes"]
            boxes = [BoundingBox(*(float(v) for v in b)) for b in raw_boxes]
            if any(len(b) != 4 for b in raw_boxes):
                raise ValueError("box needs 4 coordinates")
        except (ValueError, KeyError, TypeError) as exc:
            raise LoadError(f"malformed annotation record at {where}: {exc}") from None
        if idx in records:
            raise LoadError(f"duplicate frame index {idx} at {where}")
        records[idx] = (img, boxes, where)
    if not records:
        raise LoadError(f"no annotation records in {ann_path}")

    order = sorted(records)
    paths, annotations = [], []
    W = H = None
    for idx in order:
        img, boxes, where = records[idx]
        path = Path(img) if os.path.isabs(img) else root / img
        if not path.exists():
            raise LoadError(f"missing frame file {path} (record {where})")
        with Image.open(path) as im:
            size = im.size
        if W is None:
            W, H = size
        elif size != (W, H):
            raise LoadError(f"frame {idx} is {size[0]}x{size[1]}, expected {W}x{H} (record {where})")
        for b in boxes:
            if b.x_min >= b.x_max or b.y_min >= b.y_max:
                raise LoadError(f"malformed box {b.as_tuple()} in record {where}")
            if b.x_min < 0 or b.y_min < 0 or b.x_max > W or b.y_max > H:
                raise LoadError(f"box {b.as_tuple()} outside world {W}x{H} in record {where}")
        paths.append(path)
        annotations.append(boxes)
    return FrameSequence(annotations, (W, H), image_paths=paths,
                         frame_rate=meta.get("frame_rate", 7.0),
                         sequence_id=meta.get("sequence_id", root.name))


def visible_targets(camera: CameraState, intr: CameraIntrinsics,
                    frame_annotations: Sequence[BoundingBox], clip: bool = True) -> List[BoundingBox]:
    """Boxes whose centre lies strictly inside the FoV, in FoV-local coordinates."""
    out = []
    for b in frame_annotations:
        if center_in_fov(b, camera, intr):
            local = b.translated(-camera.fov_origin_x, -camera.fov_origin_y)
            out.append(local.clipped(intr.fov_width, intr.fov_height) if clip else local)
    return out


def render_observation(camera: CameraState, intr: CameraIntrinsics, image: np.ndarray) -> np.ndarray:
    x, y = camera.fov_origin_x, camera.fov_origin_y
    H, W = image.shape[:2]
    if x < 0 or y < 0 or x + intr.fov_width > W or y + intr.fov_height > H:
        raise InvalidInputError(f"camera {camera} outside a {W}x{H} world")
    return np.array(image[y:y + intr.fov_height, x:x + intr.fov_width])


@dataclass
class StepStats:
    clipped_actions: int = 0


def clip_action(action: ControlLabel, stats: Optional[StepStats] = None) -> ControlLabel:
    ux, uy = action.u_x, action.u_y
    if not (math.isfinite(ux) and math.isfinite(uy)):
        raise InvalidInputError(f"non-finite action {action}")
    if abs(ux) > 1.0 or abs(uy) > 1.0:
        if stats is not None:
            stats.clipped_actions += 1
        log.debug("clipping out-of-range action %s", action)
        return ControlLabel(min(max(ux, -1.0), 1.0), min(max(uy, -1.0), 1.0), action.count)
    return action


def step(camera: CameraState, action: ControlLabel, intr: CameraIntrinsics,
         world_size: Tuple[int, int], stats: Optional[StepStats] = None) -> CameraState:
    """Move the FoV by the rounded pixel shift of ``action`` and clamp to the world."""
    action = clip_action(action, stats)
    dx, dy = label_to_pixel_shift(action, intr)
    moved = CameraState(camera.fov_origin_x + math.floor(dx + 0.5),
                        camera.fov_origin_y + math.floor(dy + 0.5))
    return moved.clamped(world_size, intr)


@dataclass(frozen=True)
class StepInfo:
    """Side information handed to controllers at every step.

    ``target_boxes`` are the unclipped FoV-local ground-truth boxes of visible
    targets; ``visible_boxes`` are the same boxes clipped to the FoV, i.e. what
    a perfect detector would report.
    """

    frame_index: int
    camera: CameraState
    intrinsics: CameraIntrinsics
    world_size: Tuple[int, int]
    target_boxes: Tuple[BoundingBox, ...] = ()
    visible_boxes: Tuple[BoundingBox, ...] = ()


class Controller(Protocol):
    name: str

    def reset(self, seed: Optional[int] = None) -> None: ...

    def __call__(self, observation: np.ndarray, info: StepInfo) -> ControlLabel: ...


@dataclass(frozen=True)
class StepRecord:
    frame_index: int
    camera_before: CameraState
    camera_after: CameraState
    action_applied: ControlLabel
    visible_count: int
    expert: ControlLabel
    latency: float


@dataclass
class EpisodeReport:
    steps: List[StepRecord]
    controller_name: str
    sequence_id: str = ""
    complete: bool = True
    error: Optional[str] = None
    clipped_actions: int = 0

    @property
    def mean_visible(self) -> float:
        if not self.steps:
            return 0.0
        return float(np.mean([s.visible_count for s in self.steps]))

    @property
    def fraction_with_target(self) -> float:
        if not self.steps:
            return 0.0
        return float(np.mean([s.visible_count >= 1 for s in self.steps]))

    @property
    def mean_abs_control_error(self) -> Tuple[float, float]:
        if not self.steps:
            return (0.0, 0.0)
        ex = np.mean([abs(s.action_applied.u_x - s.expert.u_x) for s in self.steps])
        ey = np.mean([abs(s.action_applied.u_y - s.expert.u_y) for s in self.steps])
        return (float(ex), float(ey))

    @property
    def mean_abs_count_error(self) -> float:
        if not self.steps:
            return 0.0
        return float(np.mean([abs(s.action_applied.count - s.expert.count) for s in self.steps]))

    @property
    def throughput(self) -> float:
        total = sum(s.latency for s in self.steps)
        return len(self.steps) / total if total > 0 else float("inf")

    def visible_series(self, window: int = 1) -> np.ndarray:
        """Moving average of visible_count over ``window`` steps."""
        counts = np.array([s.visible_count for s in self.steps], dtype=float)
        if window <= 1 or counts.size == 0:
            return counts
        kernel = np.ones(min(window, counts.size)) / min(window, counts.size)
        return np.convolve(counts, kernel, mode="valid")

    def summary(self) -> dict:
        ex, ey = self.mean_abs_control_error
        return {
            "controller_name": self.controller_name,
            "sequence_id": self.sequence_id,
            "n_steps": len(self.steps),
            "complete": self.complete,
            "error": self.error,
            "mean_visible": self.mean_visible,
            "fraction_with_target": self.fraction_with_target,
            "mean_abs_control_error_x": ex,
            "mean_abs_control_error_y": ey,
            "mean_abs_count_error": self.mean_abs_count_error,
            "clipped_actions": self.clipped_actions,
            "throughput": self.throughput,
        }


def run_episode(seq: FrameSequence, controller, start: CameraState, intr: CameraIntrinsics,
                seed: Optional[int] = None) -> EpisodeReport:
    """Closed-loop run: one observation, one controller call and one camera step per frame."""
    world = seq.world_size
    if world[0] < intr.fov_width or world[1] < intr.fov_height:
        raise InvalidInputError(f"world {world} smaller than FoV {intr.size}")
    camera = start.clamped(world, intr)
    name = getattr(controller, "name", type(controller).__name__)
    if hasattr(controller, "reset"):
        controller.reset(seed)
    stats = StepStats()
    report = EpisodeReport(steps=[], controller_name=name, sequence_id=seq.sequence_id)
    for i in range(len(seq)):
        boxes = seq.annotations[i]
        targets = tuple(visible_targets(camera, intr, boxes, clip=False))
        info = StepInfo(
            frame_index=i, camera=camera, intrinsics=intr, world_size=world,
            target_boxes=targets,
            visible_boxes=tuple(b.clipped(intr.fov_width, intr.fov_height) for b in targets),
        )
        obs = render_observation(camera, intr, seq.image(i))
        t0 = time.perf_counter()
        try:
            action = controller(obs, info)
            latency = time.perf_counter() - t0
            applied = clip_action(action, stats)
        except Exception as exc:  # noqa: BLE001 - any controller fault aborts the episode
            log.warning("controller %s failed on frame %d: %s", name, i, exc)
            report.complete = False
            report.error = f"frame {i}: {type(exc).__name__}: {exc}"
            break
        after = step(camera, applied, intr, world)
        report.steps.append(StepRecord(
            frame_index=i, camera_before=camera, camera_after=after, action_applied=applied,
            visible_count=len(targets), expert=expert_label(camera, intr, boxes), latency=latency,
        ))
        camera = after
    report.clipped_actions = stats.clipped_actions
    return report


def _step_to_record(s: StepRecord) -> dict:
    return {
        "frame_index": s.frame_index,
        "camera_before": [s.camera_before.fov_origin_x, s.camera_before.fov_origin_y],
        "camera_after": [s.camera_after.fov_origin_x, s.camera_after.fov_origin_y],
        "action_applied": list(s.action_applied.as_tuple()),
        "visible_count": s.visible_count,
        "expert": list(s.expert.as_tuple()),
        "latency": s.latency,
    }


def write_episode_report(report: EpisodeReport, path) -> Path:
    """One JSON record per step followed by a ``{"summary": ...}`` record."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for s in report.steps:
            fh.write(json.dumps({"step": _step_to_record(s)}) + "\n")
        fh.write(json.dumps({"summary": report.summary()}) + "\n")
    return path


def read_episode_report(path) -> EpisodeReport:
    steps, summary = [], None
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        try:
            rec = json.loads(line)
            if "summary" in rec:
                summary = rec["summary"]
                continue
            s = rec["step"]
            steps.append(StepRecord(
                frame_index=s["frame_index"],
                camera_before=CameraState(*s["camera_before"]),
                camera_after=CameraState(*s["camera_after"]),
                action_applied=ControlLabel(*s["action_applied"]),
                visible_count=s["visible_count"],
                expert=ControlLabel(*s["expert"]),
                latency=s["latency"],
            ))
        except (ValueError, KeyError, TypeError) as exc:
            raise LoadError(f"malformed episode record at {path}:{lineno}: {exc}") from None
    if summary is None:
        raise LoadError(f"episode report {path} has no summary record")
    return EpisodeReport(steps=steps, controller_name=summary["controller_name"],
                         sequence_id=summary.get("sequence_id", ""),
                         complete=summary.get("complete", True), error=summary.get("error"),
                         clipped_actions=summary.get("clipped_actions", 0))
