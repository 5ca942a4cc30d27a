"""Per-level expert routing: Hadamard feature fusion, router CNN, logit fusion."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .expert import LEAKY_SLOPE, ConfigError, ExpertConfig, ParameterSet, expert_forward, uniform_fan_in, zeros_param


@dataclass(frozen=True)
class RouterConfig:
    num_experts: int = 2
    hidden_channels: int = 16
    router_channels: int | None = None

    def __post_init__(self):
        if self.num_experts < 1:
            raise ConfigError("num_experts must be >= 1")
        if self.router_channels is None:
            object.__setattr__(self, "router_channels", 2 * self.hidden_channels)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RouterConfig":
        return cls(**d)


@dataclass
class MoEOutputs:
    box_logits: list[Tensor]
    cls_logits: list[Tensor]
    alphas: list[Tensor]
    expert_outputs: list


def uses_second_conv(grid: int) -> bool:
    # a 2x2 map is already 1x1 after the first stride-2 conv
    return grid >= 4


def init_router_params(router_config: RouterConfig, expert_config: ExpertConfig, seed: int) -> ParameterSet:
    """Fresh router and fusion-weight parameters for every level."""
    if router_config.hidden_channels != expert_config.hidden_channels:
        raise ConfigError("router hidden_channels must match the experts'")
    rng = np.random.default_rng(seed)
    E, h, rc = router_config.num_experts, router_config.hidden_channels, router_config.router_channels
    params: ParameterSet = {}
    for k, grid in enumerate(expert_config.grid_sizes):
        params[f"level{k}.fusion"] = Tensor(np.ones((h, 1, 1), dtype=ad.get_default_dtype()), requires_grad=True)
        cin = (E + 1) * h
        params[f"level{k}.conv0.weight"] = uniform_fan_in(rng, (rc, cin, 3, 3), cin * 9)
        params[f"level{k}.conv0.bias"] = zeros_param((rc,))
        if uses_second_conv(grid):
            params[f"level{k}.conv1.weight"] = uniform_fan_in(rng, (rc, rc, 3, 3), rc * 9)
            params[f"level{k}.conv1.bias"] = zeros_param((rc,))
        params[f"level{k}.fc.weight"] = uniform_fan_in(rng, (E, rc), rc)
        params[f"level{k}.fc.bias"] = zeros_param((E,))
    return params


def hadamard_fuse(features: Sequence[Tensor], fusion_weight: Tensor) -> Tensor:
    """Element-wise product of all expert features, reweighted per channel."""
    if not features:
        raise ad.ShapeError("hadamard_fuse needs at least one feature map")
    prod = features[0]
    for f in features[1:]:
        if f.shape != prod.shape:
            raise ad.ShapeError(f"hadamard_fuse: feature shapes {f.shape} and {prod.shape} differ")
        prod = ad.elementwise_mul(prod, f)
    return ad.elementwise_mul(prod, fusion_weight)


def build_router_input(features: Sequence[Tensor], fused: Tensor) -> Tensor:
    for f in features:
        if f.shape != fused.shape:
            raise ad.ShapeError(f"build_router_input: {f.shape} vs fused {fused.shape}")
    return ad.concat_channels(list(features) + [fused])


def router_logits(M: Tensor, params: ParameterSet, level: int) -> Tensor:
    prefix = f"level{level}"
    x = ad.conv2d(M, params[f"{prefix}.conv0.weight"], params[f"{prefix}.conv0.bias"], stride=2, padding=1)
    x = ad.leaky_relu(x, LEAKY_SLOPE)
    if f"{prefix}.conv1.weight" in params:
        x = ad.conv2d(x, params[f"{prefix}.conv1.weight"], params[f"{prefix}.conv1.bias"], stride=2, padding=1)
        x = ad.leaky_relu(x, LEAKY_SLOPE)
    pooled = ad.global_avg_pool(x)
    return ad.linear(pooled, params[f"{prefix}.fc.weight"], params[f"{prefix}.fc.bias"])


def router_forward(M: Tensor, params: ParameterSet, level: int) -> Tensor:
    """Routing weights (B, E) for one level; each row sums to one."""
    return ad.softmax(router_logits(M, params, level), axis=1)


def fuse_logits(per_expert_logits: Sequence[Tensor], alpha: Tensor) -> Tensor:
    """sum_e alpha[:, e] * z_e, applied to raw logits."""
    return ad.weighted_sum(per_expert_logits, alpha)


def moe_forward(image: Tensor, experts: Sequence[ParameterSet], router_params: ParameterSet,
                expert_config: ExpertConfig, router_config: RouterConfig) -> MoEOutputs:
    if len(experts) != router_config.num_experts:
        raise ConfigError(f"{len(experts)} experts given, router expects {router_config.num_experts}")
    outs = [expert_forward(image, p, expert_config) for p in experts]
    box, cls, alphas = [], [], []
    for k in range(len(expert_config.strides)):
        feats = [o.features[k] for o in outs]
        fused = hadamard_fuse(feats, router_params[f"level{k}.fusion"])
        alpha = router_forward(build_router_input(feats, fused), router_params, k)
        box.append(fuse_logits([o.box_logits[k] for o in outs], alpha))
        cls.append(fuse_logits([o.cls_logits[k] for o in outs], alpha))
        alphas.append(alpha)
    return MoEOutputs(box, cls, alphas, outs)
