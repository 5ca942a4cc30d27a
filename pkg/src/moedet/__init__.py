"""Mixture-of-experts object detection on synthetic two-domain scenes, in numpy."""

from .autodiff import Tensor, backward, default_dtype, no_grad
from .expert import ExpertConfig, expert_forward, init_params
from .geometry import Box, Detection, decode_dfl, nms
from .router import RouterConfig, init_router_params, moe_forward
from .training import TrainConfig, load_checkpoint, save_checkpoint

__all__ = [
    "Tensor", "backward", "default_dtype", "no_grad",
    "ExpertConfig", "expert_forward", "init_params",
    "Box", "Detection", "decode_dfl", "nms",
    "RouterConfig", "init_router_params", "moe_forward",
    "TrainConfig", "load_checkpoint", "save_checkpoint",
]
__version__ = "0.1.0"
