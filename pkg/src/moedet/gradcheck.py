"""Central finite-difference checks of the analytic gradients.

Errors are measured per input tensor as ||analytic - numeric|| / max(||analytic||,
||numeric||) over the probed coordinates, in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

TOLERANCE = 1e-4


@dataclass
class GradCheck:
    name: str
    max_rel_error: float
    probes: int
    per_input: dict[str, float] = field(default_factory=dict)
    rejected: int = 0

    @property
    def ok(self) -> bool:
        return self.max_rel_error < TOLERANCE


PRIMITIVE_STEP = 1e-3
# deep graphs through small group-norm groups are curved enough that the
# O(h^2) truncation error of a 1e-3 step alone approaches the tolerance
COMPOSED_STEP = 1e-5


def fd_step(x: float, scale: float = PRIMITIVE_STEP) -> float:
    return scale * (abs(x) + 1.0)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    diff = np.linalg.norm(analytic - numeric)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(diff / scale)


def _branches(fn: Callable[[], Tensor]) -> tuple[float, list[np.ndarray]]:
    with ad.record_branches() as log:
        value = fn().item()
    return value, log


def _same_branches(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def check_gradients(fn: Callable[[], Tensor], inputs: dict[str, Tensor], name: str = "",
                    max_probes: int | None = None, rng: np.random.Generator | None = None,
                    step: float = PRIMITIVE_STEP, min_step: float = 1e-9) -> GradCheck:
    """Compare backward() against central differences of ``fn`` w.r.t. each input.

    ``fn`` must rebuild the graph from the current ``inputs`` data and return a
    scalar. At most ``max_probes`` coordinates per tensor are perturbed. A probe
    whose perturbation flips a max/min/leaky_relu branch is retried with a
    10x smaller step; if no step down to ``min_step`` stays on one side of every
    kink the probe is rejected (counted in ``rejected``).
    """
    rng = rng or np.random.default_rng(0)
    for t in inputs.values():
        t.zero_grad()
    ad.backward(fn())
    _, base = _branches(fn)
    per_input, probes, rejected = {}, 0, 0
    for key, t in inputs.items():
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_probes is not None and flat.size > max_probes:
            idx = np.sort(rng.choice(flat.size, size=max_probes, replace=False))
        kept, numeric = [], []
        for k in idx:
            orig = flat[k]
            h = fd_step(orig, step)
            while h >= min_step * (abs(orig) + 1.0):
                flat[k] = orig + h
                up, up_br = _branches(fn)
                flat[k] = orig - h
                down, down_br = _branches(fn)
                flat[k] = orig
                if _same_branches(base, up_br) and _same_branches(base, down_br):
                    kept.append(k)
                    numeric.append((up - down) / (2 * h))
                    break
                h *= 0.1
            else:
                rejected += 1
        if kept:
            per_input[key] = relative_error(t.grad.reshape(-1)[kept], np.array(numeric))
        probes += len(kept)
    return GradCheck(name, max(per_input.values(), default=0.0), probes, per_input, rejected)


def _away_from_zero(rng: np.random.Generator, shape, margin: float = 0.05) -> np.ndarray:
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


def _param(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


def primitive_checks(seed: int = 0) -> list[GradCheck]:
    """One finite-difference check per differentiable primitive."""
    rng = np.random.default_rng(seed)
    r = lambda *s: _param(rng.standard_normal(s))  # noqa: E731
    weights = rng.standard_normal  # random projection keeps every output coordinate in play
    results = []

    def proj(t: Tensor, w: np.ndarray) -> Tensor:
        return ad.sum(t * Tensor(w))

    with ad.default_dtype(np.float64):
        a, b = r(3, 4), r(3, 4)
        w34 = weights((3, 4))
        results.append(check_gradients(lambda: proj(ad.add(a, b), w34), {"a": a, "b": b}, "add"))
        results.append(check_gradients(lambda: proj(ad.sub(a, b), w34), {"a": a, "b": b}, "sub"))
        results.append(check_gradients(lambda: proj(ad.scale(ad.neg(a), 1.7), w34), {"a": a}, "neg/scale"))
        results.append(check_gradients(lambda: proj(ad.elementwise_mul(a, b), w34), {"a": a, "b": b}, "mul"))
        fmap, cw = r(2, 4, 3, 3), r(4, 1, 1)
        w4 = weights((2, 4, 3, 3))
        results.append(check_gradients(lambda: proj(ad.elementwise_mul(fmap, cw), w4),
                                       {"x": fmap, "w": cw}, "mul(channel broadcast)"))
        pos = _param(rng.uniform(0.5, 2.0, (3, 4)))
        results.append(check_gradients(lambda: proj(ad.div(a, pos), w34), {"a": a, "b": pos}, "div"))
        c = _param(a.data + _away_from_zero(rng, (3, 4), 0.1))
        results.append(check_gradients(lambda: proj(ad.maximum(a, c), w34), {"a": a, "b": c}, "maximum"))
        results.append(check_gradients(lambda: proj(ad.minimum(a, c), w34), {"a": a, "b": c}, "minimum"))
        kinked = _param(_away_from_zero(rng, (3, 4)))
        results.append(check_gradients(lambda: proj(ad.leaky_relu(kinked), w34), {"x": kinked}, "leaky_relu"))
        targets = (rng.random((3, 4)) > 0.5).astype(np.float64)
        results.append(check_gradients(lambda: ad.sum(ad.bce_with_logits(a, targets)), {"x": a}, "bce_with_logits"))
        results.append(check_gradients(lambda: proj(ad.reshape(a, (4, 3)), w34.reshape(4, 3)), {"x": a}, "reshape"))
        results.append(check_gradients(lambda: proj(a[:, 1], w34[:, 1]), {"x": a}, "getitem"))
        w_sum = weights((2, 3, 3))
        results.append(check_gradients(lambda: proj(ad.sum(fmap, axis=1), w_sum), {"x": fmap}, "sum(axis)"))
        results.append(check_gradients(lambda: ad.scale(ad.mean(a), 3.0), {"x": a}, "mean"))
        w_pool = weights((2, 4))
        results.append(check_gradients(lambda: proj(ad.global_avg_pool(fmap), w_pool), {"x": fmap}, "global_avg_pool"))
        p1, p2 = r(2, 2, 3, 3), r(2, 3, 3, 3)
        w_cat = weights((2, 5, 3, 3))
        results.append(check_gradients(lambda: proj(ad.concat_channels([p1, p2]), w_cat),
                                       {"p1": p1, "p2": p2}, "concat_channels"))
        results.append(check_gradients(lambda: proj(ad.softmax(a, axis=1), w34), {"x": a}, "softmax"))
        results.append(check_gradients(lambda: proj(ad.log_softmax(a, axis=0), w34), {"x": a}, "log_softmax"))
        x, W, bias = r(3, 5), r(4, 5), r(4)
        w_lin = weights((3, 4))
        results.append(check_gradients(lambda: proj(ad.linear(x, W, bias), w_lin),
                                       {"x": x, "w": W, "b": bias}, "linear"))
        img, k, kb = r(2, 3, 8, 8), r(4, 3, 3, 3), r(4)
        w_conv = weights((2, 4, 4, 4))
        results.append(check_gradients(lambda: proj(ad.conv2d(img, k, kb, stride=2, padding=1), w_conv),
                                       {"x": img, "k": k, "b": kb}, "conv2d", max_probes=40, rng=rng))
        gw, gb = r(4), r(4)
        results.append(check_gradients(lambda: proj(ad.group_norm(fmap, 2, gw, gb), w4),
                                       {"x": fmap, "w": gw, "b": gb}, "group_norm"))
        parts = [r(2, 3, 2, 2), r(2, 3, 2, 2)]
        alpha = r(2, 2)
        w_mix = weights((2, 3, 2, 2))
        results.append(check_gradients(lambda: proj(ad.weighted_sum(parts, alpha), w_mix),
                                       {"z0": parts[0], "z1": parts[1], "alpha": alpha}, "weighted_sum"))
    return results


def composed_check(seed: int = 0, num_experts: int = 2, lambda_lb: float = 0.5,
                   max_probes: int = 6) -> GradCheck:
    """Finite differences through expert features, routing, fusion and the total loss."""
    from .expert import ExpertConfig, init_params
    from .geometry import Box
    from .losses import LossWeights, assign_targets, detection_loss, load_balance_loss, routing_stats, total_loss
    from .router import RouterConfig, init_router_params, moe_forward

    rng = np.random.default_rng(seed)
    with ad.default_dtype(np.float64):
        cfg = ExpertConfig(hidden_channels=8, num_bins=4, num_classes=2, image_size=64)
        rc = RouterConfig(num_experts, cfg.hidden_channels)
        experts = [init_params(cfg, seed + 1 + e) for e in range(num_experts)]
        router = init_router_params(rc, cfg, seed + 100)
        for p in list(router.values()) + [t for e in experts for t in e.values()]:
            p.data += 0.1 * rng.standard_normal(p.shape)
        images = Tensor(rng.random((2, 3, 64, 64)))
        gts = [[(Box(4.0, 5.0, 9.0, 11.0), 0), (Box(10.0, 8.0, 22.0, 20.0), 1)],
               [(Box(2.0, 14.0, 30.0, 31.0), 1)]]
        assignments = [assign_targets(g, cfg) for g in gts]

        # hard routing fractions are constants of the loss; freeze them at the base point
        with ad.no_grad():
            frozen_f = routing_stats(moe_forward(images, experts, router, cfg, rc).alphas).f

        def loss_fn() -> Tensor:
            out = moe_forward(images, experts, router, cfg, rc)
            l_det, _ = detection_loss(out.box_logits, out.cls_logits, assignments, cfg, LossWeights())
            stats = routing_stats(out.alphas)
            stats.f = frozen_f
            l_lb = load_balance_loss(stats, num_experts, len(out.alphas))
            return total_loss(l_det, l_lb, lambda_lb)

        inputs = {f"router.{k}": v for k, v in router.items()}
        inputs.update({f"experts.{e}.{k}": v for e, p in enumerate(experts) for k, v in p.items()})
        return check_gradients(loss_fn, inputs, f"moe_forward->total_loss (E={num_experts})",
                               max_probes=max_probes, rng=rng, step=COMPOSED_STEP)


def run_suite(seed: int = 0) -> list[GradCheck]:
    return primitive_checks(seed) + [composed_check(seed)]
