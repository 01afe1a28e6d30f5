"""Training loop, checkpoint container and inference throughput benchmark."""
from __future__ import annotations

import json
import logging
import os
import platform
import time
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Tuple, Union

import numpy as np
import torch

from .dataset import AugmentationPolicy, DatasetManifest, augment, balance_batches
from .errors import CheckpointError, InvalidInputError, TrainingDiverged
from .model import (
    ACDCNet,
    NetworkConfig,
    control_loss,
    count_parameters,
    images_to_tensor,
    labels_to_array,
    lr_schedule,
)
from .sim import FrameSequence

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "acdc-checkpoint"
CHECKPOINT_VERSION = 1
REFERENCE_FPS = 25.0


@dataclass
class TrainConfig:
    epochs: int = 500
    batch_size: int = 32
    initial_lr: float = 1e-3
    lr_decay_factor: float = 0.95
    lr_decay_every: int = 5
    adam_betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-7
    seed: int = 0
    deterministic: bool = True
    balance: bool = True
    high_threshold: float = 0.1
    high_fraction: float = 0.5
    augment: bool = True
    checkpoint_every: int = 0
    validate: bool = True
    recalibrate_bn: bool = True

    def __post_init__(self):
        self.adam_betas = tuple(self.adam_betas)

    def lr(self, epoch: int) -> float:
        return lr_schedule(epoch, self.initial_lr, self.lr_decay_factor, self.lr_decay_every)


def full_preset() -> Tuple[NetworkConfig, TrainConfig]:
    return NetworkConfig(), TrainConfig()


def desk_preset() -> Tuple[NetworkConfig, TrainConfig]:
    return NetworkConfig(input_width=160, input_height=120), TrainConfig(epochs=100)


@dataclass
class TrainResult:
    network: ACDCNet
    loss_history: List[float]
    val_history: List[Optional[float]]
    epochs_completed: int
    checkpoint_path: Optional[Path] = None


def set_deterministic(seed: int, enabled: bool = True) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)
    if enabled:
        torch.use_deterministic_algorithms(True, warn_only=True)
        torch.set_num_threads(1)


def _derive_seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def recalibrate_batchnorm(net: ACDCNet, images: np.ndarray, batch_size: int = 64) -> None:
    """Replace running batch-norm statistics by exact population statistics of ``images``.

    The 0.99 running-average momentum lags far behind the weights over the few
    hundred updates of a desk-scale run. Layers are calibrated in order, each
    on the inference-mode activations of the already calibrated layers before
    it, using the biased (population) variance that training normalizes with.
    """
    bns = [m for m in net.modules() if isinstance(m, torch.nn.modules.batchnorm._BatchNorm)]
    if not bns:
        return
    net.eval()
    dtype = next(net.parameters()).dtype
    for bn in bns:
        acc = {"n": 0, "s": 0.0, "ss": 0.0}

        def hook(module, inputs, acc=acc):
            x = inputs[0].detach().to(torch.float64).transpose(0, 1).reshape(inputs[0].shape[1], -1)
            acc["n"] += x.shape[1]
            acc["s"] = acc["s"] + x.sum(dim=1)
            acc["ss"] = acc["ss"] + (x * x).sum(dim=1)

        handle = bn.register_forward_pre_hook(hook)
        try:
            with torch.no_grad():
                for s in range(0, len(images), batch_size):
                    net(images_to_tensor(images[s:s + batch_size], dtype))
        finally:
            handle.remove()
        mean = acc["s"] / acc["n"]
        var = (acc["ss"] / acc["n"] - mean * mean).clamp_min(0.0)
        bn.running_mean.copy_(mean.to(bn.running_mean.dtype))
        bn.running_var.copy_(var.to(bn.running_var.dtype))


def evaluate_loss(net: ACDCNet, images: np.ndarray, labels: np.ndarray, batch_size: int = 64) -> float:
    """Inference-mode mean loss over a dataset."""
    net.eval()
    dtype = next(net.parameters()).dtype
    total = 0.0
    with torch.no_grad():
        for s in range(0, len(images), batch_size):
            x = images_to_tensor(images[s:s + batch_size], dtype)
            y = torch.as_tensor(labels[s:s + batch_size], dtype=dtype)
            total += float(control_loss(net(x), y)) * len(x)
    return total / len(images)


def train(net: ACDCNet, manifest: DatasetManifest, config: TrainConfig,
          policy: Optional[AugmentationPolicy] = None,
          sources: Union[FrameSequence, Mapping[str, FrameSequence], None] = None,
          out_dir=None, resume=None,
          on_epoch: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Fit ``net`` to the manifest's train split with Adam and step-decayed learning rate.

    Writes ``train_log.jsonl`` plus checkpoints into ``out_dir`` when given.
    ``resume`` may be a checkpoint path; epoch numbering, optimizer state and
    loss history continue from it.
    """
    train_idx = manifest.indices("train")
    if not train_idx:
        raise InvalidInputError("manifest has an empty train split")
    cfg_in = net.config
    intr = manifest.intrinsics
    if (intr.fov_width, intr.fov_height) != (cfg_in.input_width, cfg_in.input_height):
        raise InvalidInputError(f"dataset FoV {intr.size} does not match network input "
                                f"{cfg_in.input_width}x{cfg_in.input_height}")
    policy = policy if (policy is not None and config.augment) else None
    set_deterministic(config.seed, config.deterministic)

    samples = [manifest.samples[i] for i in train_idx]
    images = np.stack([s.image for s in samples])
    labels = labels_to_array([s.label for s in samples])
    test_idx = manifest.indices("test")
    if config.validate and test_idx:
        val_images = np.stack([manifest.samples[i].image for i in test_idx])
        val_labels = labels_to_array([manifest.samples[i].label for i in test_idx])
    else:
        val_images = None

    dtype = next(net.parameters()).dtype
    optimizer = torch.optim.Adam(net.parameters(), lr=config.initial_lr,
                                 betas=config.adam_betas, eps=config.adam_eps)
    history: List[float] = []
    val_history: List[Optional[float]] = []
    start_epoch = 0
    if resume is not None:
        ckpt = read_checkpoint(resume)
        net.load_state_dict(ckpt["state"])
        if ckpt.get("optimizer") is not None:
            optimizer.load_state_dict(ckpt["optimizer"])
        history = list(ckpt["meta"].get("loss_history", []))
        val_history = list(ckpt["meta"].get("val_history", []))
        start_epoch = int(ckpt["meta"].get("epoch", len(history)))

    out_dir = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "train_log.jsonl", "a" if resume is not None else "w")

    def meta(epoch):
        return {"epoch": epoch, "loss_history": history, "val_history": val_history,
                "train_config": _jsonable(asdict(config)),
                "augmentation": None if policy is None else _jsonable(asdict(policy))}

    ckpt_path = None
    try:
        for epoch in range(start_epoch, config.epochs):
            lr = config.lr(epoch)
            for group in optimizer.param_groups:
                group["lr"] = lr
            net.train()
            epoch_seed = _derive_seed(config.seed, epoch)
            # per-epoch dropout stream so a resumed run replays an uninterrupted one
            torch.manual_seed(_derive_seed(config.seed, epoch, 1))
            if config.balance:
                batches = balance_batches(samples, config.batch_size, config.high_threshold,
                                          config.high_fraction, seed=epoch_seed)
            else:
                perm = np.random.default_rng(epoch_seed).permutation(len(samples))
                batches = (perm[s:s + config.batch_size] for s in range(0, len(samples), config.batch_size))

            total, seen = 0.0, 0
            for b, idx in enumerate(batches):
                if policy is not None:
                    aug = [augment(samples[i], policy, _derive_seed(config.seed, epoch, b, k), sources)
                           for k, i in enumerate(idx)]
                    x_np = np.stack([a.image for a in aug])
                    y_np = labels_to_array([a.label for a in aug])
                else:
                    x_np, y_np = images[idx], labels[idx]
                x = images_to_tensor(x_np, dtype)
                y = torch.as_tensor(y_np, dtype=dtype)
                optimizer.zero_grad(set_to_none=True)
                loss = control_loss(net(x), y)
                if not torch.isfinite(loss):
                    diag = None
                    if out_dir is not None:
                        diag = save_checkpoint(out_dir / "diverged.pt", net, optimizer, meta(epoch))
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {b}", diag)
                loss.backward()
                optimizer.step()
                total += loss.item() * len(idx)
                seen += len(idx)

            history.append(total / seen)
            val = evaluate_loss(net, val_images, val_labels) if val_images is not None else None
            val_history.append(val)
            record = {"epoch": epoch, "lr": lr, "train_loss": history[-1], "val_loss": val}
            if log_fh is not None:
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
            if on_epoch is not None:
                on_epoch(record)
            if out_dir is not None and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
                save_checkpoint(out_dir / f"epoch_{epoch + 1:04d}.pt", net, optimizer, meta(epoch + 1))
    finally:
        if log_fh is not None:
            log_fh.close()

    completed = max(config.epochs, start_epoch)
    if config.recalibrate_bn:
        recalibrate_batchnorm(net, images)
    if out_dir is not None:
        ckpt_path = save_checkpoint(out_dir / "final.pt", net, optimizer, meta(completed))
    net.eval()
    return TrainResult(net, history, val_history, completed, ckpt_path)


def _jsonable(obj):
    return json.loads(json.dumps(obj))


def save_checkpoint(path, net: ACDCNet, optimizer=None, meta: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": net.config.to_dict(),
        "state": {k: v.detach().clone() for k, v in net.state_dict().items()},
        "optimizer": None if optimizer is None else optimizer.state_dict(),
        "meta": meta or {},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


def read_checkpoint(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # noqa: BLE001 - torch raises a variety of types for corrupt files
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not an {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path} has checkpoint version {payload.get('version')}, "
                              f"expected {CHECKPOINT_VERSION}")
    return payload


def load_checkpoint(path, config: Optional[NetworkConfig] = None) -> Tuple[ACDCNet, dict]:
    """Rebuild a network from a checkpoint.

    With ``config`` the weights are loaded into that architecture instead (for
    instance at another input resolution); tensors whose shapes disagree are
    reported by name.
    """
    payload = read_checkpoint(path)
    stored = NetworkConfig.from_dict(payload["config"])
    cfg = config if config is not None else stored
    net = ACDCNet(cfg.validate())
    own = net.state_dict()
    state = payload["state"]
    missing = sorted(set(own) - set(state))
    unexpected = sorted(set(state) - set(own))
    mismatched = sorted(k for k in set(own) & set(state) if tuple(own[k].shape) != tuple(state[k].shape))
    if missing or unexpected or mismatched:
        parts = []
        if mismatched:
            parts.append("shape mismatch in " + ", ".join(
                f"{k} {tuple(state[k].shape)} vs {tuple(own[k].shape)}" for k in mismatched))
        if missing:
            parts.append("missing " + ", ".join(missing))
        if unexpected:
            parts.append("unexpected " + ", ".join(unexpected))
        raise CheckpointError(f"checkpoint {path} incompatible: " + "; ".join(parts))
    net.load_state_dict(state)
    net.eval()
    return net, payload["meta"]


def benchmark_inference(net: ACDCNet, n_frames: int = 50, warmup: int = 3, seed: int = 0) -> Dict:
    """Single-image forward throughput with environment metadata."""
    if n_frames < 10:
        raise InvalidInputError("n_frames must be at least 10")
    from .model import predict

    cfg = net.config
    rng = np.random.default_rng(seed)
    frames = rng.integers(0, 256, size=(n_frames, cfg.input_height, cfg.input_width, 3), dtype=np.uint8)
    for i in range(warmup):
        predict(net, frames[i % n_frames])
    t0 = time.perf_counter()
    for f in frames:
        predict(net, f)
    elapsed = time.perf_counter() - t0
    return {
        "method": "acdcnet",
        "fps": n_frames / elapsed,
        "n_frames": n_frames,
        "input_width": cfg.input_width,
        "input_height": cfg.input_height,
        "parameters": count_parameters(net),
        "torch": torch.__version__,
        "threads": torch.get_num_threads(),
        "machine": platform.machine(),
        "processor": platform.processor() or platform.machine(),
        "python": platform.python_version(),
        "reference_fps": REFERENCE_FPS,
    }
