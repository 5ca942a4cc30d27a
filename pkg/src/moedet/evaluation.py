"""COCO-style detection metrics: per-class AP at 10 IoU thresholds, mAP@0.5:0.95, AR@100."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import Box, Detection, pairwise_iou

IOU_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))
# k / 100 rounds the same way as tp / num_gt, so exact recall ratios hit their grid point
RECALL_GRID = np.arange(101) / 100.0
MAX_DETS = 100


@dataclass
class EvalResult:
    ap: dict[int, list[float]]  # class -> AP per IoU threshold
    mAP_50_95: float
    AR: float
    counts: dict[float, dict[str, int]] = field(default_factory=dict)  # threshold -> TP/FP/FN

    @property
    def mAP_50(self) -> float:
        vals = [v[0] for v in self.ap.values()]
        return float(np.mean(vals)) if vals else 0.0


def _canonical(dets: Sequence[Detection]) -> list[Detection]:
    # a total order that does not depend on input order
    return sorted(dets, key=lambda d: (-d.score, d.class_id, *d.box))


def match_detections(dets: Sequence[Detection], gts: Sequence[tuple[Box, int]],
                     iou_threshold: float) -> tuple[list[bool], int]:
    """Greedy per-class matching of score-sorted detections; returns TP flags and FN count."""
    gt_boxes = np.array([tuple(b) for b, _ in gts], dtype=np.float64).reshape(-1, 4)
    gt_cls = np.array([c for _, c in gts], dtype=int)
    det_boxes = np.array([tuple(d.box) for d in dets], dtype=np.float64).reshape(-1, 4)
    overlaps = pairwise_iou(det_boxes, gt_boxes)
    flags = _match_from_overlaps(overlaps, [d.class_id for d in dets], gt_cls, iou_threshold)
    return flags, len(gts) - int(np.sum(flags))


def _match_from_overlaps(overlaps: np.ndarray, det_cls, gt_cls: np.ndarray, thr: float) -> list[bool]:
    taken = np.zeros(len(gt_cls), dtype=bool)
    flags = []
    for k, cls in enumerate(det_cls):
        cand = np.where((gt_cls == cls) & ~taken & (overlaps[k] >= thr), overlaps[k], -1.0)
        best = int(np.argmax(cand)) if cand.size else -1
        if best >= 0 and cand[best] >= 0:
            taken[best] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags


def average_precision(flags: Sequence[bool], num_gt: int, scores: Sequence[float] | None = None) -> float:
    """101-point interpolated AP of score-ordered TP/FP flags.

    With ``scores`` given, equal-score runs are evaluated only at their end so
    the result does not depend on the order inside a tie.
    """
    flags = np.asarray(flags, dtype=bool)
    if num_gt == 0:
        return 0.0
    if flags.size == 0:
        return 0.0
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    if scores is not None:
        s = np.asarray(scores, dtype=np.float64)
        ends = np.flatnonzero(np.append(s[1:] != s[:-1], True))
        tp, fp = tp[ends], fp[ends]
    recall = tp / num_gt
    precision = tp / (tp + fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_GRID, side="left")
    sampled = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(sampled.mean())


def evaluate(dets_per_image: Sequence[Sequence[Detection]],
             gts_per_image: Sequence[Sequence[tuple[Box, int]]],
             iou_thresholds: Sequence[float] = IOU_THRESHOLDS, max_dets: int = MAX_DETS) -> EvalResult:
    if len(dets_per_image) != len(gts_per_image):
        raise ValueError("need one detection list per ground-truth list")
    classes = sorted({c for gts in gts_per_image for _, c in gts}
                     | {d.class_id for dets in dets_per_image for d in dets})
    n_thr = len(iou_thresholds)
    # per class: list of (score, flags per threshold)
    records: dict[int, list[tuple[float, np.ndarray]]] = {c: [] for c in classes}
    num_gt = {c: 0 for c in classes}
    matched = {c: np.zeros(n_thr, dtype=int) for c in classes}
    for dets, gts in zip(dets_per_image, gts_per_image):
        dets = _canonical(dets)[:max_dets]
        gt_cls = np.array([c for _, c in gts], dtype=int)
        for c in gt_cls:
            num_gt[int(c)] += 1
        gt_boxes = np.array([tuple(b) for b, _ in gts], dtype=np.float64).reshape(-1, 4)
        overlaps = pairwise_iou(np.array([tuple(d.box) for d in dets]).reshape(-1, 4), gt_boxes)
        det_cls = [d.class_id for d in dets]
        per_thr = np.array([_match_from_overlaps(overlaps, det_cls, gt_cls, t) for t in iou_thresholds],
                           dtype=bool).reshape(n_thr, len(dets))
        for k, d in enumerate(dets):
            records[d.class_id].append((d.score, per_thr[:, k]))
            matched[d.class_id] += per_thr[:, k]
    ap: dict[int, list[float]] = {}
    recalls = []
    counts = {float(t): {"TP": 0, "FP": 0, "FN": 0} for t in iou_thresholds}
    for c in classes:
        recs = sorted(records[c], key=lambda r: -r[0])
        if num_gt[c] == 0 and not recs:
            continue
        scores = [r[0] for r in recs]
        flags = np.array([r[1] for r in recs], dtype=bool).reshape(len(recs), n_thr)
        ap[c] = [average_precision(flags[:, t], num_gt[c], scores) for t in range(n_thr)]
        for t, thr in enumerate(iou_thresholds):
            tp = int(flags[:, t].sum())
            counts[float(thr)]["TP"] += tp
            counts[float(thr)]["FP"] += len(recs) - tp
            counts[float(thr)]["FN"] += num_gt[c] - tp
        if num_gt[c] > 0:
            recalls.append(matched[c] / num_gt[c])
    mAP = float(np.mean([np.mean(v) for v in ap.values()])) if ap else 0.0
    AR = float(np.mean(recalls)) if recalls else 0.0
    return EvalResult(ap, mAP, AR, counts)


def format_report(rows: dict[str, dict[str, float]], title: str = "") -> str:
    """Plain-text table: one row per model, one column per metric."""
    columns = sorted({k for r in rows.values() for k in r})
    width = max([len(n) for n in rows] + [5])
    lines = [title] if title else []
    lines.append(" ".join([f"{'model':<{width}}"] + [f"{c:>16}" for c in columns]))
    for name, vals in rows.items():
        lines.append(" ".join([f"{name:<{width}}"] + [f"{vals.get(c, float('nan')):>16.4f}" for c in columns]))
    return "\n".join(lines) + "\n"


def format_key_values(values: dict[str, float]) -> str:
    return "".join(f"{k}={v:.6f}\n" for k, v in values.items())


def write_report(path, text: str, values: dict[str, float]) -> tuple[Path, Path]:
    """Write ``<path>.txt`` and ``<path>.kv``."""
    base = Path(path)
    txt, kv = base.with_suffix(".txt"), base.with_suffix(".kv")
    txt.write_text(text)
    kv.write_text(format_key_values(values))
    return txt, kv
