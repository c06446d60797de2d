"""Detection and anomaly metrics: AP at an IoU threshold, ROC AUC, bootstrap CI, timing."""
from __future__ import annotations

import time
from fractions import Fraction
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata

from .core import BoundingBox, box_iou, mask_iou, tight_bbox


class UndefinedMetricError(ValueError):
    pass


@dataclass
class Detection:
    image_id: str
    mask: np.ndarray
    box: BoundingBox
    confidence: float

    @classmethod
    def from_mask(cls, image_id: str, mask: np.ndarray, confidence: float) -> "Detection":
        box = tight_bbox(mask)
        if box is None:
            raise ValueError("detection mask is empty")
        return cls(image_id, np.asarray(mask, dtype=bool), box, float(confidence))


def match_detections(dets: Sequence[Detection], gts: dict[str, list[np.ndarray]],
                     iou_t: float = 0.5, iou: str = "mask") -> list[bool]:
    """Greedy confidence-ordered matching; returns TP flags in sorted order."""
    order = sorted(range(len(dets)), key=lambda i: -dets[i].confidence)
    gt_boxes = {k: [tight_bbox(g) for g in v] for k, v in gts.items()} if iou == "box" else None
    used = {k: np.zeros(len(v), dtype=bool) for k, v in gts.items()}
    tp = []
    for i in order:
        d = dets[i]
        cands = gts.get(d.image_id, [])
        best, best_j = -1.0, -1
        for j, g in enumerate(cands):
            if used[d.image_id][j]:
                continue
            v = mask_iou(d.mask, g) if iou == "mask" else box_iou(d.box, gt_boxes[d.image_id][j])
            if v > best:
                best, best_j = v, j
        hit = best_j >= 0 and best >= iou_t
        if hit:
            used[d.image_id][best_j] = True
        tp.append(hit)
    return tp


def average_precision(dets: Sequence[Detection], gts: dict[str, list[np.ndarray]],
                      iou_t: float = 0.5, iou: str = "mask") -> float:
    """Area under the all-points interpolated precision/recall curve.

    No ground truth at all gives 1.0 when there are no detections either, else 0.0.
    """
    n_gt = sum(len(v) for v in gts.values())
    if n_gt == 0:
        return 1.0 if len(dets) == 0 else 0.0
    if len(dets) == 0:
        return 0.0
    tp = match_detections(dets, gts, iou_t, iou)
    # precision and recall are integer ratios: sum them exactly, round once
    ctp = np.cumsum(tp).tolist()
    precision = [Fraction(c, k) for k, c in enumerate(ctp, start=1)]
    env, best = [], Fraction(0)
    for p in reversed(precision):
        best = max(best, p)
        env.append(best)
    env.reverse()
    prev, area = 0, Fraction(0)
    for c, e in zip(ctp, env):
        area += Fraction(c - prev, n_gt) * e
        prev = c
    return float(area)


def _check_binary(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(int)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    return s, y


def roc_auc(scores, labels) -> float:
    """Mann-Whitney form: P(pos > neg) + 0.5 P(tie)."""
    s, y = _check_binary(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC AUC needs both classes")
    ranks = rankdata(s)
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def bootstrap_ci(scores, labels, n_resamples: int = 1000, level: float = 0.95,
                 seed: int = 0) -> tuple[float, float]:
    """Percentile interval of AUC over i.i.d. resamples of (score, label) pairs.

    Each resample uses its own child RNG stream; single-class draws are redrawn.
    """
    s, y = _check_binary(scores, labels)
    if y.min() == y.max():
        raise UndefinedMetricError("bootstrap needs both classes")
    n = s.size
    aucs = np.empty(n_resamples)
    redraws = 0
    for i, child in enumerate(np.random.SeedSequence(seed).spawn(n_resamples)):
        rng = np.random.default_rng(child)
        while True:
            idx = rng.integers(n, size=n)
            yy = y[idx]
            if yy.min() != yy.max():
                break
            redraws += 1
            if redraws > 10 * n_resamples:
                raise UndefinedMetricError("too many single-class resamples")
        aucs[i] = roc_auc(s[idx], yy)
    alpha = (1.0 - level) / 2.0
    lo, hi = np.percentile(aucs, [100 * alpha, 100 * (1 - alpha)])
    return float(lo), float(hi)


@dataclass
class Timing:
    mean_ms: float
    std_ms: float
    n: int


def time_inference(fn: Callable, inputs: Sequence, warmup: int = 3) -> Timing:
    if len(inputs) == 0:
        raise ValueError("need at least one input")
    for i in range(warmup):
        fn(inputs[i % len(inputs)])
    times = []
    for x in inputs:
        t0 = time.perf_counter()
        fn(x)
        times.append((time.perf_counter() - t0) * 1000.0)
    times = np.asarray(times)
    return Timing(float(times.mean()), float(times.std()), len(times))
