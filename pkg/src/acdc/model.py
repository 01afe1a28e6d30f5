"""ACDCNet: a compact CNN regressing pan/tilt displacement and target count from one image."""
from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, InvalidInputError
from .geometry import ControlLabel

REFERENCE_PARAMS = 386_000
PARAM_TOLERANCE = 0.15
N_BLOCKS = 7
N_DOWNSAMPLING = 3
MAX_FILTERS = 128

DEFAULT_BLOCKS = ((16, 3, 2), (32, 3, 2), (64, 3, 2), (64, 3, 1), (96, 3, 1), (96, 3, 1), (128, 3, 1))


@dataclass
class NetworkConfig:
    input_width: int = 320
    input_height: int = 240
    block_specs: Tuple[Tuple[int, int, int], ...] = DEFAULT_BLOCKS
    leaky_slope: float = 0.3
    dropout_rate: float = 0.2
    dropout_after_block: int = 4
    condense_filters: int = 64
    condense_kernel: int = 3
    projection_width: int = 32
    dense_widths: Tuple[int, ...] = (100, 50)
    # Keras-style momentum: running = momentum * running + (1 - momentum) * batch
    bn_momentum: float = 0.99
    bn_eps: float = 1e-3
    seed: int = 0
    # probe networks used in gradient checks opt out of the parameter budget
    enforce_param_budget: bool = True

    def __post_init__(self):
        self.block_specs = tuple(tuple(int(v) for v in b) for b in self.block_specs)
        self.dense_widths = tuple(int(v) for v in self.dense_widths)

    def validate(self) -> "NetworkConfig":
        if len(self.block_specs) != N_BLOCKS:
            raise ConfigError(f"expected {N_BLOCKS} extractor blocks, got {len(self.block_specs)}")
        for i, (filters, kernel, stride) in enumerate(self.block_specs):
            if not 0 < filters <= MAX_FILTERS:
                raise ConfigError(f"block {i} has {filters} filters; limit is {MAX_FILTERS}")
            want = 2 if i < N_DOWNSAMPLING else 1
            if stride != want:
                raise ConfigError(f"block {i} stride must be {want}, got {stride}")
            if kernel < 1 or kernel % 2 == 0:
                raise ConfigError(f"block {i} kernel must be odd, got {kernel}")
        if self.condense_filters > MAX_FILTERS:
            raise ConfigError(f"controller conv has {self.condense_filters} filters; limit is {MAX_FILTERS}")
        if not 0 <= self.dropout_rate < 1:
            raise ConfigError(f"dropout_rate {self.dropout_rate} outside [0, 1)")
        if self.input_width < 8 or self.input_height < 8:
            raise ConfigError("input must be at least 8x8 pixels")
        if self.enforce_param_budget:
            if self.leaky_slope != 0.3:
                raise ConfigError(f"leaky_slope must be 0.3, got {self.leaky_slope}")
            n = count_parameters_for(self)
            lo, hi = REFERENCE_PARAMS * (1 - PARAM_TOLERANCE), REFERENCE_PARAMS * (1 + PARAM_TOLERANCE)
            if not lo <= n <= hi:
                raise ConfigError(f"{n} trainable parameters outside [{lo:.0f}, {hi:.0f}]")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["block_specs"] = [list(b) for b in self.block_specs]
        d["dense_widths"] = list(self.dense_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)


def count_parameters_for(cfg: NetworkConfig) -> int:
    """Closed-form trainable parameter count (convs, dense layers, batch-norm scale/shift)."""
    n, c = 0, 3
    for filters, kernel, _ in cfg.block_specs:
        n += c * kernel * kernel * filters + filters + 2 * filters
        c = filters
    n += c * cfg.condense_kernel ** 2 * cfg.condense_filters + cfg.condense_filters
    n += cfg.condense_filters * cfg.projection_width + cfg.projection_width
    prev = cfg.projection_width
    for w in cfg.dense_widths:
        n += prev * w + w
        prev = w
    return n + prev * 3 + 3


class ConvBlock(nn.Sequential):
    def __init__(self, c_in, filters, kernel, stride, slope, momentum, eps):
        super().__init__(
            nn.Conv2d(c_in, filters, kernel, stride=stride, padding=kernel // 2),
            nn.LeakyReLU(slope),
            nn.BatchNorm2d(filters, eps=eps, momentum=1.0 - momentum),
        )


class ACDCNet(nn.Module):
    """Feature extractor (7 conv blocks) followed by a conv/dense controller with 3 heads.

    Takes float images in [0, 1] shaped ``(N, 3, H, W)`` and returns ``(N, 3)``
    rows of ``(u_x, u_y, count)``: the displacements are hard-clipped to
    [-1, 1] and the count passes through a ReLU.
    """

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        layers, c = [], 3
        for i, (filters, kernel, stride) in enumerate(config.block_specs, start=1):
            layers.append(ConvBlock(c, filters, kernel, stride, config.leaky_slope,
                                    config.bn_momentum, config.bn_eps))
            if i == config.dropout_after_block:
                layers.append(nn.Dropout(config.dropout_rate))
            c = filters
        self.features = nn.Sequential(*layers)

        dense, prev = [], config.projection_width
        for j, w in enumerate(config.dense_widths):
            if j > 0:
                dense.append(nn.Dropout(config.dropout_rate))
            dense += [nn.Linear(prev, w), nn.ELU()]
            prev = w
        self.controller = nn.Sequential(
            nn.Conv2d(c, config.condense_filters, config.condense_kernel, padding=config.condense_kernel // 2),
            nn.ELU(),
            nn.Conv2d(config.condense_filters, config.projection_width, 1),
            nn.ELU(),
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
            *dense,
        )
        self.head = nn.Linear(prev, 3)
        self._init_weights(config.seed)

    def _init_weights(self, seed):
        gen = torch.Generator().manual_seed(int(seed))
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                fan_out, fan_in = m.weight.shape[0], m.weight[0].numel()
                receptive = m.weight[0, 0].numel()
                bound = float(np.sqrt(6.0 / (fan_in + fan_out * receptive)))
                with torch.no_grad():
                    m.weight.uniform_(-bound, bound, generator=gen)
                    m.bias.zero_()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        z = self.head(self.controller(self.features(x)))
        return torch.cat([torch.clamp(z[:, :2], -1.0, 1.0), torch.relu(z[:, 2:])], dim=1)


def build_network(config: Optional[NetworkConfig] = None) -> ACDCNet:
    config = (config or NetworkConfig()).validate()
    return ACDCNet(config)


def count_parameters(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters() if p.requires_grad)


def images_to_tensor(images: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """uint8 ``(N, H, W, 3)`` -> float ``(N, 3, H, W)`` scaled by 1/255."""
    t = torch.from_numpy(np.array(images, dtype=np.uint8)).to(dtype)
    return t.permute(0, 3, 1, 2).div(255.0).contiguous()


def _check_images(net: ACDCNet, images: np.ndarray) -> np.ndarray:
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    cfg = net.config
    if images.ndim != 4 or images.shape[1:] != (cfg.input_height, cfg.input_width, 3):
        raise InvalidInputError(
            f"expected image(s) of shape ({cfg.input_height}, {cfg.input_width}, 3), got {images.shape[-3:]}")
    if images.dtype != np.uint8:
        raise InvalidInputError(f"expected 8-bit images, got {images.dtype}")
    return images


def predict(net: ACDCNet, images: np.ndarray) -> np.ndarray:
    """Inference-mode outputs for a batch of 8-bit RGB images, as an ``(N, 3)`` array."""
    images = _check_images(net, images)
    was_training = net.training
    net.eval()
    try:
        with torch.no_grad():
            dtype = next(net.parameters()).dtype
            out = net(images_to_tensor(images, dtype))
    finally:
        net.train(was_training)
    return out.cpu().numpy().astype(np.float64)


def forward(net: ACDCNet, image: np.ndarray) -> ControlLabel:
    out = predict(net, image)
    if out.shape[0] != 1:
        raise InvalidInputError("forward takes a single image; use predict for batches")
    return ControlLabel(float(out[0, 0]), float(out[0, 1]), float(out[0, 2]))


def control_loss(pred, truth) -> torch.Tensor:
    """Batch mean of squared count error plus absolute pan and tilt errors.

    Rows are ``(u_x, u_y, count)``.
    """
    pred = torch.as_tensor(pred)
    truth = torch.as_tensor(truth, dtype=pred.dtype)
    if pred.ndim != 2 or pred.shape[1] != 3 or pred.shape != truth.shape:
        raise InvalidInputError(f"prediction {tuple(pred.shape)} and truth {tuple(truth.shape)} must both be (N, 3)")
    if pred.shape[0] == 0:
        raise InvalidInputError("empty batch")
    diff = truth - pred
    per_sample = diff[:, 2] ** 2 + diff[:, 0].abs() + diff[:, 1].abs()
    return per_sample.mean()


def labels_to_array(labels: Sequence[ControlLabel]) -> np.ndarray:
    return np.array([l.as_tuple() for l in labels], dtype=np.float64).reshape(-1, 3)


def lr_schedule(epoch: int, initial_lr: float = 1e-3, decay_factor: float = 0.95,
                decay_every: int = 5) -> float:
    if epoch < 0:
        raise InvalidInputError("epoch must be non-negative")
    return initial_lr * decay_factor ** (epoch // decay_every)


class NetworkController:
    """Closed-loop policy backed by a trained network."""

    def __init__(self, net: ACDCNet, name: str = "acdcnet"):
        self.net = net
        self.name = name
        net.eval()

    def reset(self, seed=None):
        pass

    def __call__(self, observation, info=None) -> ControlLabel:
        return forward(self.net, observation)
