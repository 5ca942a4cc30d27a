"""Box algebra, DFL decoding, IoU/GIoU and greedy per-class NMS.

Box side distances are ordered (left, top, bottom, right) everywhere in this
package; bin ``k`` of a side distribution stands for a distance of ``k``
strides.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

SIDES = ("left", "top", "bottom", "right")

IOU_THRESHOLD = 0.45
SCORE_THRESHOLD = 0.05
MAX_DETECTIONS = 100


class Box(NamedTuple):
    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return max(self.x2 - self.x1, 0.0) * max(self.y2 - self.y1, 0.0)

    @property
    def center(self) -> tuple[float, float]:
        return 0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2)

    def is_valid(self) -> bool:
        return bool(np.all(np.isfinite(self))) and self.x1 <= self.x2 and self.y1 <= self.y2


@dataclass(frozen=True)
class Detection:
    box: Box
    class_id: int
    score: float


def decode_dfl(probs, cell_center: tuple[float, float], stride: float) -> Box:
    """Expected side distances of a (4, N) bin distribution, turned into a box."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] != 4 or p.shape[1] < 2:
        raise ValueError(f"expected a (4, N>=2) distribution, got shape {p.shape}")
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-4):
        raise ValueError("each side distribution must be non-negative and sum to 1")
    left, top, bottom, right = expected_distances(p) * stride
    cx, cy = cell_center
    return Box(cx - left, cy - top, cx + right, cy + bottom)


def expected_distances(probs: np.ndarray) -> np.ndarray:
    """Sum_k k * p_k over the last axis, in bin units."""
    bins = np.arange(probs.shape[-1], dtype=probs.dtype)
    return probs @ bins


def iou(a: Box, b: Box) -> float:
    iw = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    ih = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = iw * ih
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def giou(a: Box, b: Box) -> float:
    iw = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    ih = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = iw * ih
    union = a.area + b.area - inter
    enclosure = (max(a.x2, b.x2) - min(a.x1, b.x1)) * (max(a.y2, b.y2) - min(a.y1, b.y1))
    value = inter / union if union > 0 else 0.0
    if enclosure > 0:
        value -= (enclosure - union) / enclosure
    return value


def pairwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU matrix between (n, 4) and (m, 4) arrays of x1, y1, x2, y2 boxes."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    ih = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = iw * ih
    area_a = np.clip(a[:, 2] - a[:, 0], 0, None) * np.clip(a[:, 3] - a[:, 1], 0, None)
    area_b = np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / union, 0.0)


def nms(dets: Sequence[Detection], iou_threshold: float = IOU_THRESHOLD,
        score_threshold: float = SCORE_THRESHOLD,
        max_detections: int = MAX_DETECTIONS) -> list[Detection]:
    """Class-wise greedy non-maximum suppression."""
    candidates = [k for k, d in enumerate(dets) if d.score >= score_threshold]
    if not candidates:
        return []
    scores = np.array([dets[k].score for k in candidates])
    # stable sort keeps the lower original index first among equal scores
    order = [candidates[k] for k in np.argsort(-scores, kind="stable")]
    boxes = np.array([dets[k].box for k in order], dtype=np.float64)
    classes = np.array([dets[k].class_id for k in order])
    overlaps = pairwise_iou(boxes, boxes)
    suppressed = np.zeros(len(order), dtype=bool)
    kept: list[Detection] = []
    for pos in range(len(order)):
        if suppressed[pos]:
            continue
        kept.append(dets[order[pos]])
        if len(kept) == max_detections:
            break
        suppressed |= (classes == classes[pos]) & (overlaps[pos] > iou_threshold)
    return kept


def anchor_points(grid: int, stride: int) -> np.ndarray:
    """(grid*grid, 2) cell centres (x, y) in pixels, row-major over (row, col)."""
    centers = (np.arange(grid, dtype=np.float64) + 0.5) * stride
    ys, xs = np.meshgrid(centers, centers, indexing="ij")
    return np.stack([xs.ravel(), ys.ravel()], axis=1)


def _softmax_np(x: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def postprocess(box_logits: Sequence[np.ndarray], cls_logits: Sequence[np.ndarray],
                strides: Sequence[int], iou_threshold: float = IOU_THRESHOLD,
                score_threshold: float = SCORE_THRESHOLD,
                max_detections: int = MAX_DETECTIONS) -> list[list[Detection]]:
    """Decode per-level logits of a batch into NMS-filtered detections per image.

    ``box_logits[i]`` is (B, 4N, G, G) laid out as four blocks of N bins in side
    order; ``cls_logits[i]`` is (B, n_c, G, G).
    """
    batch = box_logits[0].shape[0]
    all_boxes, all_scores = [], []
    for bl, cl, stride in zip(box_logits, cls_logits, strides):
        B, C4, G, _ = bl.shape
        n_bins = C4 // 4
        probs = _softmax_np(bl.reshape(B, 4, n_bins, G * G).astype(np.float64), axis=2)
        dist = np.einsum("bsnc,n->bcs", probs, np.arange(n_bins, dtype=np.float64)) * stride
        pts = anchor_points(G, stride)
        boxes = np.stack([pts[None, :, 0] - dist[..., 0], pts[None, :, 1] - dist[..., 1],
                          pts[None, :, 0] + dist[..., 3], pts[None, :, 1] + dist[..., 2]], axis=-1)
        scores = 1.0 / (1.0 + np.exp(-cl.reshape(B, cl.shape[1], G * G).astype(np.float64)))
        all_boxes.append(boxes)
        all_scores.append(scores.transpose(0, 2, 1))
    boxes = np.concatenate(all_boxes, axis=1)  # B, cells, 4
    scores = np.concatenate(all_scores, axis=1)  # B, cells, n_c
    results = []
    for b in range(batch):
        cell_idx, cls_idx = np.nonzero(scores[b] >= score_threshold)
        dets = [Detection(Box(*map(float, boxes[b, c])), int(k), float(scores[b, c, k]))
                for c, k in zip(cell_idx, cls_idx)]
        results.append(nms(dets, iou_threshold, score_threshold, max_detections))
    return results
