"""Evaluation metrics: per-class IoU with class-averaged mean, and a
center-distance average precision for detections.

Classes with an empty prediction-union-truth region carry no information
and are excluded from the mean; if every class is empty the mean is NaN
with a defined-class count of zero.
"""

from __future__ import annotations

import numpy as np

Array = np.ndarray


def miou(pred: Array, gt: Array, threshold: float = 0.5) -> tuple[Array, float, int]:
    """Per-class IoU of thresholded probabilities against binary truth.

    Returns (per-class IoU with NaN where undefined, mean over defined
    classes, count of defined classes).
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != truth shape {gt.shape}")
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    mask = pred > threshold
    truth = gt > 0.5
    classes = pred.shape[0]
    per_class = np.full(classes, np.nan)
    for c in range(classes):
        union = np.logical_or(mask[c], truth[c]).sum()
        if union == 0:
            continue
        inter = np.logical_and(mask[c], truth[c]).sum()
        per_class[c] = inter / union
    defined = np.isfinite(per_class)
    mean = float(per_class[defined].mean()) if defined.any() else float("nan")
    return per_class, mean, int(defined.sum())


def average_precision(
    dets: Array, gts: Array, dist_threshold: float = 2.0
) -> tuple[dict[int, float], float]:
    """Greedy center-distance AP per class, and the mean over classes that
    have ground truth.

    `dets` rows are (confidence, class, cx, cy) sorted by descending
    confidence; `gts` rows are (class, cx, cy). A detection matches the
    nearest unclaimed truth of its class within the distance threshold.
    AP integrates the interpolated precision envelope over recall.
    """
    dets = np.asarray(dets, dtype=np.float64).reshape(-1, 4)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 3)
    if len(dets) > 1 and np.any(np.diff(dets[:, 0]) > 0):
        raise ValueError("detections must be sorted by descending confidence")
    per_class: dict[int, float] = {}
    for cls in sorted({int(g[0]) for g in gts}):
        truth = gts[gts[:, 0] == cls][:, 1:]
        cand = dets[dets[:, 1] == cls]
        if len(cand) == 0:
            per_class[cls] = 0.0
            continue
        claimed = np.zeros(len(truth), dtype=bool)
        tp = np.zeros(len(cand))
        for i, det in enumerate(cand):
            d = np.linalg.norm(truth - det[2:], axis=1)
            d[claimed] = np.inf
            j = int(np.argmin(d)) if len(d) else -1
            if j >= 0 and d[j] <= dist_threshold:
                claimed[j] = True
                tp[i] = 1.0
        cum_tp = np.cumsum(tp)
        precision = cum_tp / np.arange(1, len(cand) + 1)
        recall = cum_tp / len(truth)
        envelope = np.maximum.accumulate(precision[::-1])[::-1]
        ap = 0.0
        prev_r = 0.0
        for p, r in zip(envelope, recall):
            if r > prev_r:
                ap += (r - prev_r) * p
                prev_r = r
        per_class[cls] = float(ap)
    mean = float(np.mean(list(per_class.values()))) if per_class else float("nan")
    return per_class, mean
