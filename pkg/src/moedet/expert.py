"""Tiny convolutional detection expert with three output levels (strides 8/16/32)."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

STRIDES = (8, 16, 32)
LEAKY_SLOPE = 0.1
NORM_GROUPS = 4

ParameterSet = dict[str, Tensor]


class ConfigError(ValueError):
    """Raised for inconsistent model or training configuration."""


@dataclass(frozen=True)
class ExpertConfig:
    hidden_channels: int = 16
    num_bins: int = 16
    num_classes: int = 4
    image_size: int = 64
    strides: tuple[int, ...] = field(default=STRIDES)

    def __post_init__(self):
        if tuple(self.strides) != STRIDES:
            raise ConfigError(f"strides are fixed at {STRIDES}")
        if self.image_size <= 0 or self.image_size % 32:
            raise ConfigError(f"image_size must be a positive multiple of 32, got {self.image_size}")
        if self.hidden_channels < 4:
            raise ConfigError("hidden_channels must be >= 4")
        if self.num_bins < 2:
            raise ConfigError("num_bins must be >= 2")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")

    @property
    def grid_sizes(self) -> tuple[int, ...]:
        return tuple(self.image_size // s for s in self.strides)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["strides"] = list(self.strides)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExpertConfig":
        d = dict(d)
        d["strides"] = tuple(d.get("strides", STRIDES))
        return cls(**d)


@dataclass
class ExpertOutputs:
    """Per-level features (the head inputs) and head logits."""

    features: list[Tensor]
    box_logits: list[Tensor]
    cls_logits: list[Tensor]


def _backbone_layout(config: ExpertConfig) -> list[tuple[str, int, int, int]]:
    h = config.hidden_channels
    layers = [("stem.0", 3, h, 2), ("stem.1", h, h, 2)]
    for k in range(len(config.strides)):
        layers += [(f"stage{k}.down", h, h, 2), (f"stage{k}.conv", h, h, 1)]
    return layers


def uniform_fan_in(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    bound = np.sqrt(1.0 / fan_in)
    data = rng.uniform(-bound, bound, size=shape).astype(ad.get_default_dtype())
    return Tensor(data, requires_grad=True)


def ones_param(shape: tuple[int, ...]) -> Tensor:
    return Tensor(np.ones(shape, dtype=ad.get_default_dtype()), requires_grad=True)


def _groups(config: ExpertConfig) -> int:
    return NORM_GROUPS if config.hidden_channels % NORM_GROUPS == 0 else 1


def zeros_param(shape: tuple[int, ...]) -> Tensor:
    return Tensor(np.zeros(shape, dtype=ad.get_default_dtype()), requires_grad=True)


def init_params(config: ExpertConfig, seed: int) -> ParameterSet:
    """Convolution weights ~ U(+-sqrt(1/fan_in)), biases zero; deterministic in ``seed``.

    Every backbone convolution is followed by a group norm (unit scale, zero
    shift) so that signal does not vanish through the eight-layer stack.
    """
    rng = np.random.default_rng(seed)
    params: ParameterSet = {}
    for name, cin, cout, _ in _backbone_layout(config):
        params[f"{name}.weight"] = uniform_fan_in(rng, (cout, cin, 3, 3), cin * 9)
        params[f"{name}.bias"] = zeros_param((cout,))
        params[f"{name}.norm.weight"] = ones_param((cout,))
        params[f"{name}.norm.bias"] = zeros_param((cout,))
    h = config.hidden_channels
    for k in range(len(config.strides)):
        for head, cout in (("box", 4 * config.num_bins), ("cls", config.num_classes)):
            params[f"head{k}.{head}.weight"] = uniform_fan_in(rng, (cout, h, 1, 1), h)
            params[f"head{k}.{head}.bias"] = zeros_param((cout,))
    return params


def expert_forward(image: Tensor, params: ParameterSet, config: ExpertConfig) -> ExpertOutputs:
    if image.data.ndim != 4 or image.shape[1] != 3:
        raise ad.ShapeError(f"expected images of shape (B,3,S,S), got {image.shape}")
    if image.shape[2] != config.image_size or image.shape[3] != config.image_size:
        raise ConfigError(f"image size {image.shape[2:]} does not match config {config.image_size}")
    x = image
    features = []
    for name, _, _, stride in _backbone_layout(config):
        x = ad.conv2d(x, params[f"{name}.weight"], params[f"{name}.bias"], stride=stride, padding=1)
        x = ad.group_norm(x, _groups(config), params[f"{name}.norm.weight"], params[f"{name}.norm.bias"])
        x = ad.leaky_relu(x, LEAKY_SLOPE)
        if name.endswith(".conv"):
            features.append(x)
    box, cls = [], []
    for k, feat in enumerate(features):
        box.append(ad.conv2d(feat, params[f"head{k}.box.weight"], params[f"head{k}.box.bias"]))
        cls.append(ad.conv2d(feat, params[f"head{k}.cls.weight"], params[f"head{k}.cls.bias"]))
    return ExpertOutputs(features, box, cls)
