"""Expert state-action datasets: generation, balancing, augmentation, splitting, storage."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, replace, asdict
from pathlib import Path
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import InvalidInputError, LoadError
from .geometry import BoundingBox, CameraIntrinsics, CameraState, ControlLabel, label_from_local_boxes
from .sim import FrameSequence, render_observation, visible_targets

log = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.jsonl"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class Provenance:
    sequence_id: str
    frame_index: int
    origin_x: int
    origin_y: int
    flipped: bool = False


@dataclass(frozen=True, eq=False)
class TrainingSample:
    image: np.ndarray
    label: ControlLabel
    provenance: Optional[Provenance] = None
    boxes: Tuple[BoundingBox, ...] = ()

    def __eq__(self, other):
        if not isinstance(other, TrainingSample):
            return NotImplemented
        return (self.label == other.label and self.provenance == other.provenance
                and self.boxes == other.boxes and self.image.shape == other.image.shape
                and np.array_equal(self.image, other.image))


@dataclass
class DatasetManifest:
    intrinsics: CameraIntrinsics
    samples: List[TrainingSample]
    split: List[str]
    seed: int = 0

    def __post_init__(self):
        if len(self.split) != len(self.samples):
            raise InvalidInputError("split assignment length differs from sample count")

    def indices(self, which: str) -> List[int]:
        return [i for i, s in enumerate(self.split) if s == which]

    def subset(self, which: str) -> List[TrainingSample]:
        return [self.samples[i] for i in self.indices(which)]

    @property
    def train(self) -> List[TrainingSample]:
        return self.subset("train")

    @property
    def test(self) -> List[TrainingSample]:
        return self.subset("test")


def _sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(index)])


def make_sample(seq: FrameSequence, intr: CameraIntrinsics, frame_index: int,
                camera: CameraState, flipped: bool = False) -> TrainingSample:
    boxes = tuple(visible_targets(camera, intr, seq.annotations[frame_index], clip=False))
    image = render_observation(camera, intr, seq.image(frame_index))
    sample = TrainingSample(image=image, label=label_from_local_boxes(boxes, intr),
                            provenance=Provenance(seq.sequence_id, frame_index,
                                                  camera.fov_origin_x, camera.fov_origin_y),
                            boxes=boxes)
    return flip_sample(sample) if flipped else sample


def generate_pairs(seq: FrameSequence, intr: CameraIntrinsics, n_samples: int,
                   seed: int = 0) -> List[TrainingSample]:
    """Random frames seen from uniformly random camera placements, labelled by the expert."""
    if n_samples < 1:
        raise InvalidInputError("n_samples must be at least 1")
    max_x = seq.world_width - intr.fov_width
    max_y = seq.world_height - intr.fov_height
    if max_x < 0 or max_y < 0:
        raise InvalidInputError(f"sequence {seq.world_size} is smaller than the FoV {intr.size}")
    out = []
    for i in range(n_samples):
        rng = _sample_rng(seed, i)
        frame = int(rng.integers(len(seq)))
        cam = CameraState(int(rng.integers(max_x + 1)), int(rng.integers(max_y + 1)))
        out.append(make_sample(seq, intr, frame, cam))
    return out


def label_magnitude(label: ControlLabel) -> float:
    return max(abs(label.u_x), abs(label.u_y))


def balance_batches(samples: Sequence, batch_size: int, high_threshold: float = 0.1,
                    high_fraction: float = 0.5, seed: int = 0) -> Iterator[np.ndarray]:
    """Yield index batches for one epoch with a guaranteed share of large displacements.

    Every batch holds at least ``floor(high_fraction * batch_size)`` samples whose
    larger displacement component reaches ``high_threshold``; the scarce high
    stratum is cycled (reshuffled each pass) to fill those slots. Every sample
    appears at least once per epoch.
    """
    if batch_size < 2:
        raise InvalidInputError("batch_size must be at least 2")
    if not 0 < high_fraction < 1:
        raise InvalidInputError("high_fraction must lie in (0, 1)")
    n = len(samples)
    if n == 0:
        return
    rng = np.random.default_rng(seed)
    labels = [s.label if hasattr(s, "label") else s for s in samples]
    is_high = np.array([label_magnitude(l) >= high_threshold for l in labels])
    high = np.flatnonzero(is_high)
    low = np.flatnonzero(~is_high)

    if batch_size >= n or high.size == 0 or low.size == 0:
        if high.size == 0:
            log.info("no sample reaches |u| >= %g; falling back to uniform shuffling", high_threshold)
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield perm[start:start + batch_size]
        return

    n_high_slots = int(math.floor(high_fraction * batch_size))
    n_low_slots = batch_size - n_high_slots
    n_batches = max(math.ceil(low.size / n_low_slots), math.ceil(n / batch_size))
    low_stream = rng.permutation(low)

    def high_stream():
        while True:
            yield from rng.permutation(high)

    highs = high_stream()
    pos = 0
    for _ in range(n_batches):
        take_low = low_stream[pos:pos + n_low_slots]
        pos += take_low.size
        take_high = np.array([next(highs) for _ in range(batch_size - take_low.size)], dtype=int)
        yield rng.permutation(np.concatenate([take_low, take_high]))


@dataclass
class AugmentationPolicy:
    blur_p: float = 0.3
    blur_sigma: Tuple[float, float] = (0.5, 1.5)
    sharpen_p: float = 0.3
    sharpen_amount: Tuple[float, float] = (0.2, 0.8)
    color_p: float = 0.3
    color_shift: float = 0.10
    illumination_p: float = 0.3
    illumination: Tuple[float, float] = (0.7, 1.3)
    translate_p: float = 0.3
    translate_max: int = 16
    flip_p: float = 0.5

    @classmethod
    def identity(cls) -> "AugmentationPolicy":
        return cls(blur_p=0, sharpen_p=0, color_p=0, illumination_p=0, translate_p=0, flip_p=0)

    def validate(self, intr: Optional[CameraIntrinsics] = None) -> "AugmentationPolicy":
        for name in ("blur_p", "sharpen_p", "color_p", "illumination_p", "translate_p", "flip_p"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise InvalidInputError(f"{name}={p} is not a probability")
        if self.translate_max < 0:
            raise InvalidInputError("translate_max must be non-negative")
        if (intr is not None and self.translate_p > 0
                and self.translate_max >= min(intr.fov_width, intr.fov_height) / 4):
            raise InvalidInputError(
                f"translate_max={self.translate_max} must stay below a quarter of the FoV {intr.size}")
        return self


def flip_sample(sample: TrainingSample) -> TrainingSample:
    """Mirror horizontally; the pan displacement changes sign."""
    width = sample.image.shape[1]
    lab = sample.label
    prov = sample.provenance
    return TrainingSample(
        image=np.ascontiguousarray(sample.image[:, ::-1]),
        label=ControlLabel(-lab.u_x if lab.u_x != 0 else 0.0, lab.u_y, lab.count),
        provenance=None if prov is None else replace(prov, flipped=not prov.flipped),
        boxes=tuple(b.mirrored_x(width) for b in sample.boxes),
    )


def translate_sample(sample: TrainingSample, tx: int, ty: int, seq: FrameSequence,
                     intr: CameraIntrinsics) -> TrainingSample:
    """Shift the crop window by (tx, ty) pixels on the source frame and relabel.

    Moving the window right by ``tx`` lowers the pan displacement by ``tx / I_x``
    as long as the same targets stay in view; targets entering or leaving the
    FoV are accounted for because the label is recomputed from ground truth.
    """
    prov = sample.provenance
    cam = CameraState(prov.origin_x + tx, prov.origin_y + ty).clamped(seq.world_size, intr)
    return make_sample(seq, intr, prov.frame_index, cam, flipped=prov.flipped)


def _blur(img, sigma):
    return ndimage.gaussian_filter(img, sigma=(sigma, sigma, 0), mode="nearest")


def augment(sample: TrainingSample, policy: AugmentationPolicy, seed: int,
            source: Union[FrameSequence, Mapping[str, FrameSequence], None] = None) -> TrainingSample:
    """Randomly perturb one sample; labels follow any geometric change.

    Translation needs the source frame (``source`` plus stored provenance) and
    is skipped otherwise, so labels are never guessed.
    """
    h, w = sample.image.shape[:2]
    intr = CameraIntrinsics(w, h)
    policy.validate(intr)
    rng = np.random.default_rng(seed)
    # draw every decision up front so the random stream does not depend on branches taken
    u = rng.random(6)
    sigma = rng.uniform(*policy.blur_sigma)
    amount = rng.uniform(*policy.sharpen_amount)
    gains = 1.0 + rng.uniform(-policy.color_shift, policy.color_shift, size=3)
    illum = rng.uniform(*policy.illumination)
    shift = rng.integers(-policy.translate_max, policy.translate_max + 1, size=2)

    out = sample
    if u[0] < policy.translate_p and sample.provenance is not None and source is not None:
        seq = source.get(sample.provenance.sequence_id) if isinstance(source, Mapping) else source
        if seq is not None and (shift[0] or shift[1]):
            out = translate_sample(out, int(shift[0]), int(shift[1]), seq, intr)
    if u[1] < policy.flip_p:
        out = flip_sample(out)

    pixel_ops = (u[2] < policy.blur_p, u[3] < policy.sharpen_p,
                 u[4] < policy.color_p, u[5] < policy.illumination_p)
    if any(pixel_ops):
        img = out.image.astype(np.float64)
        if pixel_ops[0]:
            img = _blur(img, sigma)
        if pixel_ops[1]:
            img = img + amount * (img - _blur(img, 1.0))
        if pixel_ops[2]:
            img = img * gains
        if pixel_ops[3]:
            img = img * illum
        out = replace(out, image=np.clip(np.rint(img), 0, 255).astype(np.uint8))
    return out


def split_dataset(samples: Sequence[TrainingSample], train_fraction: float = 0.75, seed: int = 0,
                  intrinsics: Optional[CameraIntrinsics] = None) -> DatasetManifest:
    """Random train/test partition that keeps samples of one source frame together.

    Groups are shuffled and a subset whose sizes sum to ``round(train_fraction * N)``
    goes to train; when no subset hits that count exactly, the largest
    reachable count below it is used.
    """
    if not 0 < train_fraction < 1:
        raise InvalidInputError("train_fraction must lie in (0, 1)")
    n = len(samples)
    if n < 2:
        raise InvalidInputError("need at least 2 samples to split")
    if intrinsics is None:
        h, w = samples[0].image.shape[:2]
        intrinsics = CameraIntrinsics(w, h)

    groups: Dict[object, List[int]] = {}
    for i, s in enumerate(samples):
        key = (s.provenance.sequence_id, s.provenance.frame_index) if s.provenance else ("", -1 - i)
        groups.setdefault(key, []).append(i)
    keys = list(groups)
    order = np.random.default_rng(seed).permutation(len(keys))
    members = [groups[keys[k]] for k in order]

    target = int(math.floor(train_fraction * n + 0.5))
    target = min(max(target, 1), n - 1)
    chosen = _subset_with_sum([len(m) for m in members], target)
    split = ["test"] * n
    n_train = 0
    for g in chosen:
        for i in members[g]:
            split[i] = "train"
        n_train += len(members[g])
    if n_train == 0:
        log.warning("a single frame group holds every sample; leakage guard leaves train empty")
    return DatasetManifest(intrinsics=intrinsics, samples=list(samples), split=split, seed=seed)


def _subset_with_sum(sizes: Sequence[int], target: int) -> List[int]:
    """Indices of groups whose sizes sum to the largest reachable value <= target.

    ``parent[s]`` records the first group that made sum ``s`` reachable, which
    is enough to walk back a valid subset in O(target) memory.
    """
    parent = np.full(target + 1, -1, dtype=np.int64)
    reach = np.zeros(target + 1, dtype=bool)
    reach[0] = True
    for g, size in enumerate(sizes):
        if size > target:
            continue
        new = np.zeros_like(reach)
        new[size:] = reach[:target + 1 - size] & ~reach[size:]
        parent[new] = g
        reach |= new
        if reach[target]:
            break
    s = int(np.flatnonzero(reach)[-1])
    chosen = []
    while s > 0:
        g = int(parent[s])
        chosen.append(g)
        s -= sizes[g]
    return chosen


def label_histogram(samples: Sequence[TrainingSample], bins: int = 10) -> Dict[str, Tuple[np.ndarray, np.ndarray]]:
    edges = np.linspace(-0.5, 0.5, bins + 1)
    ux = np.array([s.label.u_x for s in samples])
    uy = np.array([s.label.u_y for s in samples])
    return {"pan": (np.histogram(ux, bins=edges)[0], edges),
            "tilt": (np.histogram(uy, bins=edges)[0], edges)}


def _box_list(boxes):
    return [list(b.as_tuple()) for b in boxes]


def write_dataset(manifest: DatasetManifest, directory) -> Path:
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    intr = manifest.intrinsics
    lines = [json.dumps({"dataset": {
        "format_version": FORMAT_VERSION,
        "intrinsics": asdict(intr),
        "seed": manifest.seed,
        "n_samples": len(manifest.samples),
    }})]
    for i, (s, sp) in enumerate(zip(manifest.samples, manifest.split)):
        rel = f"images/{i:06d}.png"
        Image.fromarray(s.image).save(directory / rel)
        # json emits shortest round-trip reprs, so floats reload bit-exactly
        lines.append(json.dumps({
            "index": i, "image": rel,
            "u_x": s.label.u_x, "u_y": s.label.u_y, "c": s.label.count,
            "provenance": None if s.provenance is None else asdict(s.provenance),
            "split": sp, "boxes": _box_list(s.boxes),
        }))
    (directory / MANIFEST_FILE).write_text("\n".join(lines) + "\n")
    return directory


def read_dataset(directory) -> DatasetManifest:
    directory = Path(directory)
    path = directory / MANIFEST_FILE
    if not path.exists():
        raise LoadError(f"dataset manifest not found: {path}")
    lines = [l for l in path.read_text().splitlines() if l.strip()]
    if not lines:
        raise LoadError(f"empty dataset manifest {path}")
    try:
        header = json.loads(lines[0])["dataset"]
        intr = CameraIntrinsics(**header["intrinsics"])
    except (ValueError, KeyError, TypeError) as exc:
        raise LoadError(f"bad dataset header in {path}: {exc}") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise LoadError(f"unsupported dataset format version {header.get('format_version')}")

    samples, split = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        where = f"{path}:{lineno}"
        try:
            rec = json.loads(line)
            label = ControlLabel(float(rec["u_x"]), float(rec["u_y"]), float(rec["c"]))
            prov = Provenance(**rec["provenance"]) if rec.get("provenance") else None
            boxes = tuple(BoundingBox(*b) for b in rec.get("boxes", []))
            img_path = directory / rec["image"]
            sp = rec["split"]
        except (ValueError, KeyError, TypeError) as exc:
            raise LoadError(f"malformed dataset record at {where}: {exc}") from None
        if sp not in ("train", "test"):
            raise LoadError(f"unknown split {sp!r} at {where}")
        if not img_path.exists():
            raise LoadError(f"missing image {img_path} for record at {where}")
        try:
            img = np.asarray(Image.open(img_path).convert("RGB"))
        except OSError as exc:
            raise LoadError(f"unreadable image {img_path} for record at {where}: {exc}") from None
        if img.shape != (intr.fov_height, intr.fov_width, 3):
            raise LoadError(f"image {img_path} has shape {img.shape}, expected FoV {intr.size}")
        samples.append(TrainingSample(img, label, prov, boxes))
        split.append(sp)
    if len(samples) != header.get("n_samples"):
        raise LoadError(f"{path} declares {header.get('n_samples')} samples but holds {len(samples)}")
    return DatasetManifest(intrinsics=intr, samples=samples, split=split, seed=header.get("seed", 0))
