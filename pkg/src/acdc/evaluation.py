"""Static (test-set) and closed-loop (episode) comparisons between controllers."""
from __future__ import annotations

import csv
import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Mapping, Optional, Sequence

import numpy as np

from .controllers import ExpertController
from .dataset import DatasetManifest, TrainingSample
from .errors import InvalidInputError
from .geometry import CameraIntrinsics, CameraState
from .sim import EpisodeReport, FrameSequence, StepInfo, run_episode, write_episode_report

log = logging.getLogger(__name__)

STATIC_COLUMNS = ["controller", "n_samples", "pan_mae", "tilt_mae", "count_mae"]
EPISODE_COLUMNS = [
    "controller", "sequence_id", "seed", "n_steps", "complete", "mean_visible",
    "fraction_with_target", "mean_abs_control_error_x", "mean_abs_control_error_y",
    "mean_abs_count_error", "throughput",
]
THROUGHPUT_COLUMNS = ["controller", "mean_fps", "std_fps", "runs"]
TIMING_FIELDS = ("throughput", "mean_fps", "std_fps", "latency")


@dataclass
class StaticEvalResult:
    controller: str
    residuals: np.ndarray  # (N, 3) prediction minus truth, columns (u_x, u_y, count)

    @property
    def pan_mae(self) -> float:
        return float(np.abs(self.residuals[:, 0]).mean()) if len(self.residuals) else 0.0

    @property
    def tilt_mae(self) -> float:
        return float(np.abs(self.residuals[:, 1]).mean()) if len(self.residuals) else 0.0

    @property
    def count_mae(self) -> float:
        return float(np.abs(self.residuals[:, 2]).mean()) if len(self.residuals) else 0.0

    def row(self) -> dict:
        return {"controller": self.controller, "n_samples": len(self.residuals),
                "pan_mae": self.pan_mae, "tilt_mae": self.tilt_mae, "count_mae": self.count_mae}


def sample_info(sample: TrainingSample, intr: CameraIntrinsics, index: int = 0) -> StepInfo:
    prov = sample.provenance
    cam = CameraState(prov.origin_x, prov.origin_y) if prov else CameraState()
    return StepInfo(
        frame_index=prov.frame_index if prov else index, camera=cam, intrinsics=intr, world_size=(0, 0),
        target_boxes=tuple(sample.boxes),
        visible_boxes=tuple(b.clipped(intr.fov_width, intr.fov_height) for b in sample.boxes),
    )


def static_eval(controller, manifest: DatasetManifest, split: str = "test") -> StaticEvalResult:
    """Per-sample residuals of ``controller`` against the stored expert labels."""
    intr = manifest.intrinsics
    net = getattr(controller, "net", None)
    if net is not None:
        cfg = net.config
        if (cfg.input_width, cfg.input_height) != (intr.fov_width, intr.fov_height):
            raise InvalidInputError(f"controller expects {cfg.input_width}x{cfg.input_height} images, "
                                    f"dataset holds {intr.fov_width}x{intr.fov_height}")
    if hasattr(controller, "reset"):
        controller.reset(None)
    rows = []
    for i in manifest.indices(split):
        s = manifest.samples[i]
        if s.image.shape[:2] != (intr.fov_height, intr.fov_width):
            raise InvalidInputError(f"sample {i} has shape {s.image.shape}, expected FoV {intr.size}")
        pred = controller(s.image, sample_info(s, intr, i))
        rows.append(np.subtract(pred.as_tuple(), s.label.as_tuple()))
    name = getattr(controller, "name", type(controller).__name__)
    return StaticEvalResult(name, np.array(rows, dtype=float).reshape(-1, 3))


@dataclass
class ComparisonReport:
    static: List[StaticEvalResult] = field(default_factory=list)
    episodes: List[EpisodeReport] = field(default_factory=list)
    episode_seeds: List[Optional[int]] = field(default_factory=list)
    throughput: List[dict] = field(default_factory=list)

    def episode_rows(self) -> List[dict]:
        rows = []
        for rep, seed in zip(self.episodes, self.episode_seeds):
            s = rep.summary()
            rows.append({
                "controller": rep.controller_name, "sequence_id": rep.sequence_id, "seed": seed,
                **{k: s[k] for k in EPISODE_COLUMNS if k in s and k not in ("sequence_id",)},
            })
        return rows

    def static_rows(self) -> List[dict]:
        return [r.row() for r in self.static]

    def find(self, controller: str, sequence_id: Optional[str] = None, seed=None) -> List[EpisodeReport]:
        return [r for r, sd in zip(self.episodes, self.episode_seeds)
                if r.controller_name == controller
                and (sequence_id is None or r.sequence_id == sequence_id)
                and (seed is None or sd == seed)]


def episode_eval(controllers: Mapping[str, Callable[[], object]], sequences: Sequence[FrameSequence],
                 intr: CameraIntrinsics, start: CameraState, seeds: Sequence[int] = (0,),
                 include_expert: bool = True, workers: int = 1) -> ComparisonReport:
    """Run every (controller, sequence, seed) episode from the same start pose.

    ``controllers`` maps names to zero-argument factories, so every episode gets a
    fresh stateful instance. Results are folded in a fixed order whatever the
    number of workers.
    """
    if not controllers and not include_expert:
        raise InvalidInputError("need at least one controller")
    if not sequences:
        raise InvalidInputError("need at least one sequence")
    factories = dict(controllers)
    if include_expert and "expert" not in factories:
        factories["expert"] = ExpertController

    jobs = [(name, seq, seed) for seq in sequences for seed in seeds for name in factories]

    def run(job):
        name, seq, seed = job
        ctrl = factories[name]()
        try:
            ctrl.name = name
        except AttributeError:
            pass
        try:
            return run_episode(seq, ctrl, start, intr, seed=seed)
        except Exception as exc:  # noqa: BLE001 - one broken episode must not sink the comparison
            log.warning("episode %s/%s/%s aborted: %s", name, seq.sequence_id, seed, exc)
            return EpisodeReport(steps=[], controller_name=name, sequence_id=seq.sequence_id,
                                 complete=False, error=f"{type(exc).__name__}: {exc}")

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    report = ComparisonReport()
    for (name, seq, seed), rep in zip(jobs, results):
        report.episodes.append(rep)
        report.episode_seeds.append(seed)
    return report


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    if v is None:
        return ""
    return str(v)


def _safe(name) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "-", str(name))


def _write_csv(path: Path, columns: Sequence[str], rows: Sequence[dict]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in columns])


def _write_jsonl(path: Path, rows: Sequence[dict]):
    with open(path, "w") as fh:
        for r in rows:
            fh.write(json.dumps(r) + "\n")


def emit_report(report: ComparisonReport, directory, formats: Sequence[str] = ("csv", "jsonl"),
                include_steps: bool = True) -> List[Path]:
    """Write the summary tables (and per-episode step traces) into ``directory``."""
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create report directory {directory}: {exc}") from exc
    tables = [("static", STATIC_COLUMNS, report.static_rows()),
              ("episodes", EPISODE_COLUMNS, report.episode_rows()),
              ("throughput", THROUGHPUT_COLUMNS, report.throughput)]
    written = []
    for stem, cols, rows in tables:
        if "csv" in formats:
            p = directory / f"{stem}.csv"
            _write_csv(p, cols, rows)
            written.append(p)
        if "jsonl" in formats:
            p = directory / f"{stem}.jsonl"
            _write_jsonl(p, [{c: r.get(c) for c in cols} for r in rows])
            written.append(p)
    if include_steps:
        for rep, seed in zip(report.episodes, report.episode_seeds):
            p = directory / f"steps__{_safe(rep.controller_name)}__{_safe(rep.sequence_id)}__seed{seed}.jsonl"
            written.append(write_episode_report(rep, p))
    return written


def _parse(v: str):
    if v == "":
        return None
    if v in ("True", "False"):
        return v == "True"
    for cast in (int, float):
        try:
            return cast(v)
        except ValueError:
            pass
    return v


def read_report_csv(path) -> List[dict]:
    with open(path, newline="") as fh:
        return [{k: _parse(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def strip_timing(rows: Sequence[dict]) -> List[dict]:
    return [{k: v for k, v in r.items() if k not in TIMING_FIELDS} for r in rows]
