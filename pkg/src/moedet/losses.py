"""Training objective: detection loss on pre-NMS logits plus routing balance."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .expert import ExpertConfig
from .geometry import Box


@dataclass(frozen=True)
class LossWeights:
    cls: float = 0.5
    box: float = 7.5
    dfl: float = 1.5


@dataclass(frozen=True)
class Assignment:
    level: int
    row: int
    col: int
    distances: tuple[float, float, float, float]  # left, top, bottom, right in strides
    class_id: int
    box: Box


@dataclass
class RoutingStats:
    f: list[np.ndarray]
    P: list[Tensor]


def select_level(box: Box, image_size: int) -> int:
    m = max(box.width, box.height)
    if m < image_size / 8:
        return 0
    if m < image_size / 4:
        return 1
    return 2


def _canonical_key(box: Box, class_id: int) -> tuple:
    return (box.area, box.x1, box.y1, box.x2, box.y2, class_id)


def assign_targets(gt_boxes: Sequence[tuple[Box, int]], config: ExpertConfig) -> list[Assignment]:
    """One positive cell per ground-truth box: the cell holding its centre at the size-selected level."""
    by_cell: dict[tuple[int, int, int], Assignment] = {}
    top = config.num_bins - 1
    for box, class_id in sorted(gt_boxes, key=lambda g: _canonical_key(Box(*g[0]), int(g[1]))):
        box = Box(*map(float, box))
        if not box.width > 0 or not box.height > 0:
            raise ValueError(f"degenerate ground-truth box {box}")
        level = select_level(box, config.image_size)
        stride = config.strides[level]
        grid = config.image_size // stride
        cx, cy = box.center
        col = min(max(int(np.floor(cx / stride)), 0), grid - 1)
        row = min(max(int(np.floor(cy / stride)), 0), grid - 1)
        ax, ay = (col + 0.5) * stride, (row + 0.5) * stride
        raw = ((ax - box.x1), (ay - box.y1), (box.y2 - ay), (box.x2 - ax))
        distances = tuple(float(np.clip(d / stride, 0.0, top)) for d in raw)
        # boxes arrive smallest first, so the first claim on a cell wins
        by_cell.setdefault((level, row, col), Assignment(level, row, col, distances, int(class_id), box))
    return sorted(by_cell.values(), key=lambda a: (a.level, a.row, a.col))


def _two_hot(targets: np.ndarray, num_bins: int, dtype) -> np.ndarray:
    """Soft labels putting (r - t) on bin l and (t - l) on bin r = l + 1."""
    lo = np.minimum(np.floor(targets), num_bins - 2).astype(int)
    w_hi = targets - lo
    q = np.zeros(targets.shape + (num_bins,), dtype=dtype)
    np.put_along_axis(q, lo[..., None], (1.0 - w_hi)[..., None], axis=-1)
    np.put_along_axis(q, lo[..., None] + 1, w_hi[..., None], axis=-1)
    return q


def _dfl_sum(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Sum over positives of the side-averaged DFL; logits (P, 4, N), targets (P, 4)."""
    num_bins = logits.shape[-1]
    if np.any(targets < 0) or np.any(targets > num_bins - 1):
        raise ValueError(f"DFL targets must lie in [0, {num_bins - 1}]")
    q = Tensor(_two_hot(targets, num_bins, logits.dtype))
    return ad.scale(ad.sum(ad.log_softmax(logits, axis=-1) * q), -0.25)


def dfl_loss(box_logits_at_cell: Tensor, target_distances) -> Tensor:
    """Distribution focal loss of one cell's (4, N) logits, averaged over sides."""
    t = np.asarray(target_distances, dtype=np.float64).reshape(1, 4)
    logits = ad.reshape(box_logits_at_cell, (1,) + tuple(box_logits_at_cell.shape))
    return _dfl_sum(logits, t)


def _giou_sum(dist: Tensor, anchors: np.ndarray, stride: int, gt: np.ndarray) -> Tensor:
    """Sum over positives of (1 - GIoU); ``dist`` is (P, 4) in strides."""
    dt = dist.dtype

    def const(a):
        return Tensor(np.asarray(a, dtype=dt))

    d = ad.scale(dist, stride)
    left, top, bottom, right = d[:, 0], d[:, 1], d[:, 2], d[:, 3]
    ax, ay = const(anchors[:, 0]), const(anchors[:, 1])
    px1, py1, px2, py2 = ax - left, ay - top, ax + right, ay + bottom
    gx1, gy1, gx2, gy2 = (const(gt[:, j]) for j in range(4))
    iw = ad.maximum(ad.minimum(px2, gx2) - ad.maximum(px1, gx1), 0.0)
    ih = ad.maximum(ad.minimum(py2, gy2) - ad.maximum(py1, gy1), 0.0)
    inter = iw * ih
    area_p = (left + right) * (top + bottom)
    area_g = const((gt[:, 2] - gt[:, 0]) * (gt[:, 3] - gt[:, 1]))
    union = area_p + area_g - inter
    enclosure = (ad.maximum(px2, gx2) - ad.minimum(px1, gx1)) * (ad.maximum(py2, gy2) - ad.minimum(py1, gy1))
    giou = inter / union - (enclosure - union) / enclosure
    return ad.add(ad.neg(ad.sum(giou)), float(len(gt)))


def detection_loss(box_logits: Sequence[Tensor], cls_logits: Sequence[Tensor],
                   assignments: Sequence[Sequence[Assignment]], config: ExpertConfig,
                   weights: LossWeights = LossWeights()) -> tuple[Tensor, dict[str, float]]:
    """Weighted classification + GIoU box + DFL loss over a batch of per-level logits.

    ``assignments[b]`` holds the positives of image ``b``. Returns the loss
    tensor and the unweighted component values.
    """
    batch = cls_logits[0].shape[0]
    n_bins = config.num_bins
    total_cells = batch * sum(g * g for g in config.grid_sizes)
    cls_sum = None
    box_sum = dfl_sum = None
    num_pos = 0
    for level, (bl, cl) in enumerate(zip(box_logits, cls_logits)):
        pos = [(b, a) for b, image_assign in enumerate(assignments) for a in image_assign if a.level == level]
        targets = np.zeros(cl.shape, dtype=cl.dtype)
        for b, a in pos:
            targets[b, a.class_id, a.row, a.col] = 1.0
        term = ad.sum(ad.bce_with_logits(cl, targets))
        cls_sum = term if cls_sum is None else cls_sum + term
        if not pos:
            continue
        num_pos += len(pos)
        stride = config.strides[level]
        b_idx = np.array([b for b, _ in pos])
        r_idx = np.array([a.row for _, a in pos])
        c_idx = np.array([a.col for _, a in pos])
        logits = ad.reshape(bl[b_idx, :, r_idx, c_idx], (len(pos), 4, n_bins))
        dist_t = np.array([a.distances for _, a in pos], dtype=np.float64)
        d_term = _dfl_sum(logits, dist_t)
        probs = ad.softmax(logits, axis=-1)
        bins = np.broadcast_to(np.arange(n_bins, dtype=bl.dtype), probs.shape)
        dist = ad.sum(probs * Tensor(bins), axis=-1)
        anchors = np.stack([(c_idx + 0.5) * stride, (r_idx + 0.5) * stride], axis=1)
        gt = np.array([a.box for _, a in pos], dtype=np.float64)
        b_term = _giou_sum(dist, anchors, stride, gt)
        dfl_sum = d_term if dfl_sum is None else dfl_sum + d_term
        box_sum = b_term if box_sum is None else box_sum + b_term
    l_cls = ad.scale(cls_sum, 1.0 / total_cells)
    loss = ad.scale(l_cls, weights.cls)
    parts = {"cls": l_cls.item(), "box": 0.0, "dfl": 0.0}
    if num_pos:
        l_box = ad.scale(box_sum, 1.0 / num_pos)
        l_dfl = ad.scale(dfl_sum, 1.0 / num_pos)
        loss = loss + ad.scale(l_box, weights.box) + ad.scale(l_dfl, weights.dfl)
        parts["box"], parts["dfl"] = l_box.item(), l_dfl.item()
    return loss, parts


def routing_stats(alphas: Sequence[Tensor]) -> RoutingStats:
    """Hard routing fractions (argmax, ties to the lowest index) and mean probabilities per level."""
    f, P = [], []
    for alpha in alphas:
        alpha = alpha if isinstance(alpha, Tensor) else Tensor(alpha)
        B, E = alpha.shape
        counts = np.bincount(np.argmax(alpha.data, axis=1), minlength=E)
        f.append(counts.astype(np.float64) / B)
        P.append(ad.mean(alpha, axis=0))
    return RoutingStats(f, P)


def load_balance_loss(stats: RoutingStats, E: int, I: int) -> Tensor:
    """(1/I) sum_i E * sum_e f_ie * P_ie, differentiable through P only."""
    if len(stats.f) != I or len(stats.P) != I:
        raise ValueError(f"expected stats for {I} levels, got {len(stats.f)}")
    total = None
    for f, P in zip(stats.f, stats.P):
        if P.shape != (E,):
            raise ValueError(f"expected {E} experts, got P of shape {P.shape}")
        term = ad.scale(ad.sum(P * Tensor(np.asarray(f, dtype=P.dtype))), E)
        total = term if total is None else total + term
    return ad.scale(total, 1.0 / I)


def total_loss(l_det, l_lb, lambda_lb: float) -> Tensor:
    if lambda_lb < 0:
        raise ValueError("lambda_lb must be non-negative")
    l_det = l_det if isinstance(l_det, Tensor) else Tensor(float(l_det))
    l_lb = l_lb if isinstance(l_lb, Tensor) else Tensor(float(l_lb))
    return l_det + ad.scale(l_lb, lambda_lb)


def routing_entropy(alpha: np.ndarray) -> np.ndarray:
    """Per-row entropy (nats) of routing weights."""
    a = np.asarray(alpha, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        return -np.where(a > 0, a * np.log(a), 0.0).sum(axis=-1)
