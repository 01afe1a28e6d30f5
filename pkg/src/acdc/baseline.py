"""Detector -> multi-target Kalman tracker -> centre-of-mass controller.

Tracks live in world pixel coordinates: detections arrive in FoV-local
coordinates and are offset by the camera origin the controller reads back
from the pan-tilt head each step.
"""
from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import InvalidInputError, LoadError
from .geometry import BoundingBox, CameraIntrinsics, ControlLabel, label_from_local_boxes

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    score: float = 1.0

    @property
    def center(self) -> Tuple[float, float]:
        return self.box.center


@dataclass
class NoisyOracleDetectorConfig:
    center_sigma: float = 0.0
    size_sigma: float = 0.0
    miss_prob: float = 0.0
    false_positive_rate: float = 0.0
    seed: int = 0

    def validate(self):
        if not 0.0 <= self.miss_prob <= 1.0:
            raise InvalidInputError(f"miss_prob {self.miss_prob} is not a probability")
        if self.center_sigma < 0 or self.size_sigma < 0 or self.false_positive_rate < 0:
            raise InvalidInputError("noise levels must be non-negative")
        return self


def detect(ground_truth: Sequence[BoundingBox], config: NoisyOracleDetectorConfig,
           frame_index: int, fov_size: Tuple[int, int]) -> List[Detection]:
    """Noisy stand-in for a learned detector, driven by FoV-local ground-truth boxes.

    Randomness is keyed on ``(seed, frame_index)`` so a given frame always
    yields the same detections.
    """
    config.validate()
    W, H = fov_size
    rng = np.random.default_rng([int(config.seed), int(frame_index)])
    out = []
    for b in ground_truth:
        # draw the same number of variates per box whatever the branch
        miss, jitter = rng.random(), rng.normal(size=4)
        if miss < config.miss_prob:
            continue
        if config.center_sigma == 0 and config.size_sigma == 0:
            out.append(Detection(b, 1.0))
            continue
        cx, cy = b.center
        cx += jitter[0] * config.center_sigma
        cy += jitter[1] * config.center_sigma
        w = b.width * max(0.2, 1.0 + jitter[2] * config.size_sigma)
        h = b.height * max(0.2, 1.0 + jitter[3] * config.size_sigma)
        box = _fit_box(cx, cy, w, h, W, H)
        if box is not None:
            out.append(Detection(box, float(np.clip(1.0 - abs(jitter[0]) * 0.1, 0.0, 1.0))))
    n_fp = rng.poisson(config.false_positive_rate) if config.false_positive_rate > 0 else 0
    for _ in range(n_fp):
        w = rng.uniform(0.04, 0.12) * W
        h = rng.uniform(1.5, 2.5) * w
        box = _fit_box(rng.uniform(0, W), rng.uniform(0, H), w, h, W, H)
        if box is not None:
            out.append(Detection(box, float(rng.uniform(0.3, 0.7))))
    return out


def _fit_box(cx, cy, w, h, W, H) -> Optional[BoundingBox]:
    box = BoundingBox(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2).clipped(W, H)
    if box.x_min >= box.x_max or box.y_min >= box.y_max:
        return None
    return box


def read_external_detections(path) -> Dict[int, List[Detection]]:
    """Replay detections produced elsewhere.

    One JSON record per line: ``{"frame": i, "x_min": .., "y_min": .., "x_max": ..,
    "y_max": .., "score": ..}`` in FoV-local pixels.
    """
    out: Dict[int, List[Detection]] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            r = json.loads(line)
            box = BoundingBox(float(r["x_min"]), float(r["y_min"]), float(r["x_max"]), float(r["y_max"])).validate()
            det = Detection(box, float(r["score"]))
            frame = int(r["frame"])
        except (ValueError, KeyError, TypeError) as exc:
            raise LoadError(f"malformed detection record at {path}:{lineno}: {exc}") from None
        out.setdefault(frame, []).append(det)
    return out


def write_external_detections(detections: Dict[int, Sequence[Detection]], path) -> Path:
    path = Path(path)
    with open(path, "w") as fh:
        for frame in sorted(detections):
            for d in detections[frame]:
                x0, y0, x1, y1 = d.box.as_tuple()
                fh.write(json.dumps({"frame": frame, "x_min": x0, "y_min": y0,
                                     "x_max": x1, "y_max": y1, "score": d.score}) + "\n")
    return path


class Status(str, Enum):
    TENTATIVE = "tentative"
    CONFIRMED = "confirmed"
    DEAD = "dead"


@dataclass
class KalmanParams:
    process_noise: Tuple[float, float, float, float] = (1.0, 1.0, 4.0, 4.0)
    measurement_noise: Tuple[float, float] = (4.0, 4.0)
    initial_covariance: Tuple[float, float, float, float] = (10.0, 10.0, 100.0, 100.0)


F = np.array([[1, 0, 1, 0], [0, 1, 0, 1], [0, 0, 1, 0], [0, 0, 0, 1]], dtype=float)
H_MEAS = np.array([[1, 0, 0, 0], [0, 1, 0, 0]], dtype=float)


@dataclass
class TrackState:
    id: int
    state: np.ndarray
    covariance: np.ndarray
    hits: int = 1
    misses: int = 0
    status: Status = Status.TENTATIVE
    age: int = 1

    @property
    def position(self) -> Tuple[float, float]:
        return (float(self.state[0]), float(self.state[1]))

    @property
    def velocity(self) -> Tuple[float, float]:
        return (float(self.state[2]), float(self.state[3]))


def new_track(track_id: int, center, params: KalmanParams = KalmanParams()) -> TrackState:
    return TrackState(id=track_id, state=np.array([center[0], center[1], 0.0, 0.0]),
                      covariance=np.diag(params.initial_covariance).astype(float))


def _kill_if_nonfinite(track: TrackState) -> TrackState:
    if not (np.all(np.isfinite(track.state)) and np.all(np.isfinite(track.covariance))):
        log.warning("track %d has a non-finite state %s; killing it", track.id, track.state)
        return replace(track, status=Status.DEAD)
    return track


def kalman_predict(track: TrackState, params: KalmanParams = KalmanParams()) -> TrackState:
    x = F @ track.state
    P = F @ track.covariance @ F.T + np.diag(params.process_noise)
    P = 0.5 * (P + P.T)
    return _kill_if_nonfinite(replace(track, state=x, covariance=P))


def kalman_update(track: TrackState, measurement, params: KalmanParams = KalmanParams()) -> TrackState:
    """Fold a centre measurement (a point or a :class:`Detection`) into the track.

    Uses the Joseph form so the covariance stays symmetric positive semidefinite.
    """
    if isinstance(measurement, Detection):
        measurement = measurement.center
    z = np.asarray(measurement, dtype=float)
    R = np.diag(params.measurement_noise)
    P = track.covariance
    S = H_MEAS @ P @ H_MEAS.T + R
    with np.errstate(invalid="ignore", over="ignore"):  # non-finite results kill the track below
        K = np.linalg.solve(S, H_MEAS @ P).T
        x = track.state + K @ (z - H_MEAS @ track.state)
        I_KH = np.eye(4) - K @ H_MEAS
        P = I_KH @ P @ I_KH.T + K @ R @ K.T
    P = 0.5 * (P + P.T)
    return _kill_if_nonfinite(replace(track, state=x, covariance=P))


def associate(track_points: Sequence[Tuple[float, float]], detection_points: Sequence[Tuple[float, float]],
              gate: float = 40.0):
    """Minimum total centre distance one-to-one matching restricted to pairs within ``gate``.

    Returns ``(matches, unmatched_tracks, unmatched_detections)`` with matches as
    ``(track_index, detection_index)`` pairs sorted by track index.
    """
    if gate <= 0:
        raise InvalidInputError("gate must be positive")
    nt, nd = len(track_points), len(detection_points)
    if nt == 0 or nd == 0:
        return [], list(range(nt)), list(range(nd))
    a = np.asarray(track_points, dtype=float).reshape(nt, 2)
    b = np.asarray(detection_points, dtype=float).reshape(nd, 2)
    dist = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
    allowed = dist <= gate
    # forbidden pairs cost more than any complete set of allowed pairs, so the
    # solver never trades an allowed match for them
    big = (dist[allowed].sum() if allowed.any() else 0.0) + 1.0
    cost = np.where(allowed, dist, big)
    # dummy columns/rows let any row or column stay unmatched at cost `big`
    n = nt + nd
    full = np.full((n, n), big)
    full[:nt, :nd] = cost
    full[nt:, nd:] = 0.0
    rows, cols = linear_sum_assignment(full)
    matches = sorted((int(r), int(c)) for r, c in zip(rows, cols)
                     if r < nt and c < nd and allowed[r, c])
    mt = {r for r, _ in matches}
    md = {c for _, c in matches}
    return matches, [i for i in range(nt) if i not in mt], [j for j in range(nd) if j not in md]


@dataclass
class LifecycleParams:
    confirm_after: int = 3
    kill_after: int = 5
    gate: float = 40.0
    kalman: KalmanParams = field(default_factory=KalmanParams)


def track_lifecycle_step(tracks: Sequence[TrackState], detection_points: Sequence[Tuple[float, float]],
                         params: LifecycleParams = LifecycleParams(),
                         id_source: Optional[Iterable[int]] = None) -> List[TrackState]:
    """Advance every live track by one frame.

    All live tracks are predicted, then matched to detections. Matched tracks are
    updated and gain a consecutive hit; unmatched ones gain a consecutive miss
    and die at ``kill_after``. Tentative tracks confirm at ``confirm_after``
    consecutive hits. Unmatched detections start tentative tracks. Tracks that
    die on this step are returned once with status ``DEAD`` and dropped on the
    next call.
    """
    live = [t for t in tracks if t.status != Status.DEAD]
    if id_source is None:
        id_source = itertools.count(max((t.id for t in tracks), default=-1) + 1)
    id_iter = iter(id_source)
    predicted = [kalman_predict(t, params.kalman) for t in live]
    alive = [t for t in predicted if t.status != Status.DEAD]
    died = [t for t in predicted if t.status == Status.DEAD]
    matches, um_tracks, um_dets = associate([t.position for t in alive], detection_points, params.gate)

    out: List[TrackState] = []
    matched = dict(matches)
    for i, t in enumerate(alive):
        if i in matched:
            t = kalman_update(t, detection_points[matched[i]], params.kalman)
            if t.status == Status.DEAD:
                out.append(t)
                continue
            hits = t.hits + 1
            status = t.status
            if status == Status.TENTATIVE and hits >= params.confirm_after:
                status = Status.CONFIRMED
            out.append(replace(t, hits=hits, misses=0, status=status, age=t.age + 1))
        else:
            misses = t.misses + 1
            status = Status.DEAD if misses >= params.kill_after else t.status
            out.append(replace(t, hits=0, misses=misses, status=status, age=t.age + 1))
    for j in um_dets:
        t = new_track(next(id_iter), detection_points[j], params.kalman)
        if params.confirm_after <= 1:
            t = replace(t, status=Status.CONFIRMED)
        out.append(t)
    return out + died


def baseline_controller(tracks: Sequence[TrackState], intr: CameraIntrinsics,
                        origin: Tuple[float, float] = (0.0, 0.0)) -> ControlLabel:
    """Centre-of-mass control from the confirmed track positions.

    ``origin`` is the camera's FoV origin when tracks are in world coordinates.
    """
    pts = np.array([t.position for t in tracks if t.status == Status.CONFIRMED], dtype=float).reshape(-1, 2)
    if len(pts) == 0:
        return ControlLabel(0.0, 0.0, 0.0)
    cx, cy = pts.mean(axis=0)
    ux = (cx - origin[0] - intr.fov_width / 2.0) / intr.fov_width
    uy = (cy - origin[1] - intr.fov_height / 2.0) / intr.fov_height
    return ControlLabel(float(np.clip(ux, -1.0, 1.0)), float(np.clip(uy, -1.0, 1.0)), float(len(pts)))


class MultiTargetTracker:
    def __init__(self, params: Optional[LifecycleParams] = None):
        self.params = params or LifecycleParams()
        self.reset()

    def reset(self):
        self.tracks: List[TrackState] = []
        self._ids = itertools.count()
        self.created = 0

    def step(self, detection_points: Sequence[Tuple[float, float]]) -> List[TrackState]:
        before = {t.id for t in self.tracks}
        self.tracks = track_lifecycle_step(self.tracks, detection_points, self.params, self._ids)
        self.created += sum(1 for t in self.tracks if t.id not in before)
        return [t for t in self.tracks if t.status != Status.DEAD]


class BaselineController:
    """Traditional pipeline as a closed-loop policy.

    Uses the noisy oracle detector on the simulator's ground truth, or replays
    external detections when ``external`` maps frame index to detections.
    """

    def __init__(self, intr: CameraIntrinsics, detector: Optional[NoisyOracleDetectorConfig] = None,
                 params: Optional[LifecycleParams] = None,
                 external: Optional[Dict[int, List[Detection]]] = None, name: str = "baseline"):
        self.intr = intr
        self.detector = detector or NoisyOracleDetectorConfig()
        self.tracker = MultiTargetTracker(params)
        self.external = external
        self.name = name
        self._seed = self.detector.seed

    def reset(self, seed=None):
        self.tracker.reset()
        self._seed = self.detector.seed if seed is None else seed

    def detections(self, info) -> List[Detection]:
        if self.external is not None:
            return list(self.external.get(info.frame_index, []))
        cfg = replace(self.detector, seed=self._seed)
        return detect(info.visible_boxes, cfg, info.frame_index, self.intr.size)

    def __call__(self, observation, info) -> ControlLabel:
        ox, oy = info.camera.fov_origin_x, info.camera.fov_origin_y
        dets = self.detections(info)
        points = [(d.center[0] + ox, d.center[1] + oy) for d in dets]
        tracks = self.tracker.step(points)
        return baseline_controller(tracks, self.intr, origin=(ox, oy))


class DetectorController:
    """Single-frame variant (detector + centre of mass, no temporal filtering) for static evaluation."""

    def __init__(self, intr: CameraIntrinsics, detector: Optional[NoisyOracleDetectorConfig] = None,
                 name: str = "detector"):
        self.intr = intr
        self.detector = detector or NoisyOracleDetectorConfig()
        self.name = name

    def reset(self, seed=None):
        pass

    def __call__(self, observation, info) -> ControlLabel:
        dets = detect(info.visible_boxes, self.detector, info.frame_index, self.intr.size)
        return label_from_local_boxes([d.box for d in dets], self.intr)
