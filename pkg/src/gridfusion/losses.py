"""Training objectives: clean-latent MSE, focal classification, smooth-L1
regression, Hungarian-matched detection, and the weighted total.

Matching runs on detached cost values (assignment is a discrete choice);
the losses themselves are built from tape tensors so gradients reach every
head parameter. Probabilities are clamped at 1e-7 before any logarithm.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from gridfusion import autodiff as ad
from gridfusion.autodiff import Tensor
from gridfusion.heads import BoxPrediction

Array = np.ndarray

PROB_FLOOR = 1e-7


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda_diff: float = 1.0
    lambda_seg: float = 1.0
    lambda_det: float = 1.0
    lambda_cls: float = 1.0
    lambda_reg: float = 0.25
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0

    def __post_init__(self):
        for name in ("lambda_diff", "lambda_seg", "lambda_det", "lambda_cls", "lambda_reg"):
            if getattr(self, name) < 0:
                raise LossError(f"{name} must be >= 0")


@dataclass
class Assignment:
    """One-to-one pairing of prediction and ground-truth indices."""

    pairs: list[tuple[int, int]]
    unmatched_predictions: list[int]

    @property
    def total_cost(self) -> float | None:
        return getattr(self, "_cost", None)


def diffusion_loss(pred_x0: Tensor, target_x0: Tensor) -> Tensor:
    """Mean squared error between predicted and clean latents."""
    return ad.mse(pred_x0, target_x0)


def focal_value(prob: float, is_positive: bool, alpha: float, gamma: float) -> float:
    """Scalar focal term; the tensor reduction lives in focal_map_loss."""
    p = min(max(prob, PROB_FLOOR), 1.0 - PROB_FLOOR)
    if is_positive:
        return -alpha * (1.0 - p) ** gamma * math.log(p)
    return -(1.0 - alpha) * p ** gamma * math.log(1.0 - p)


def _focal_pos(p: Tensor, alpha: float, gamma: float) -> Tensor:
    one = p.tape.constant(1.0)
    return ad.scalar_mul(ad.mul(ad.pow_const(ad.sub(one, p), gamma), ad.log(p)), -alpha)


def _focal_neg(p: Tensor, alpha: float, gamma: float) -> Tensor:
    one = p.tape.constant(1.0)
    return ad.scalar_mul(
        ad.mul(ad.pow_const(p, gamma), ad.log(ad.sub(one, p))), -(1.0 - alpha)
    )


def focal_map_loss(probs: Tensor, targets: Array, alpha: float, gamma: float) -> Tensor:
    """Mean focal loss over a probability map against a binary target map."""
    if probs.shape != targets.shape:
        raise LossError(f"probability map {probs.shape} != target map {targets.shape}")
    tape = probs.tape
    p = ad.clamp(probs, PROB_FLOOR, 1.0 - PROB_FLOOR)
    pos_mask = tape.constant(np.asarray(targets, dtype=np.float64))
    neg_mask = tape.constant(1.0 - np.asarray(targets, dtype=np.float64))
    terms = ad.add(
        ad.mul(pos_mask, _focal_pos(p, alpha, gamma)),
        ad.mul(neg_mask, _focal_neg(p, alpha, gamma)),
    )
    return ad.mean(terms)


def smooth_l1(x: Tensor) -> Tensor:
    """Elementwise 0.5 x^2 for |x| < 1, |x| - 0.5 beyond."""
    return ad.smooth_l1(x)


def hungarian_match(cost: Array) -> Assignment:
    """Minimum-total-cost one-to-one assignment of min(K, M) pairs.

    Shortest-augmenting-path formulation with potentials, O(n^2 m).
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] < 1 or cost.shape[1] < 1:
        raise LossError(f"cost must be a non-empty 2-d matrix, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise LossError("cost matrix contains non-finite entries")
    k, m = cost.shape
    transposed = k > m
    a = cost.T if transposed else cost
    n, mm = a.shape

    INF = math.inf
    u = [0.0] * (n + 1)
    v = [0.0] * (mm + 1)
    assigned = [0] * (mm + 1)  # column -> row (1-based, 0 = free)
    way = [0] * (mm + 1)
    for i in range(1, n + 1):
        assigned[0] = i
        j0 = 0
        minv = [INF] * (mm + 1)
        used = [False] * (mm + 1)
        while True:
            used[j0] = True
            i0 = assigned[j0]
            delta = INF
            j1 = -1
            for j in range(1, mm + 1):
                if used[j]:
                    continue
                cur = a[i0 - 1][j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(mm + 1):
                if used[j]:
                    u[assigned[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if assigned[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            assigned[j0] = assigned[j1]
            j0 = j1

    pairs = []
    for j in range(1, mm + 1):
        if assigned[j]:
            row, col = assigned[j] - 1, j - 1
            pairs.append((col, row) if transposed else (row, col))
    pairs.sort()
    matched_preds = {p for p, _ in pairs}
    result = Assignment(
        pairs=pairs,
        unmatched_predictions=[i for i in range(k) if i not in matched_preds],
    )
    result._cost = float(sum(cost[p, g] for p, g in pairs))
    return result


def brute_force_match(cost: Array) -> float:
    """Exhaustive optimal assignment cost; oracle for small matrices."""
    cost = np.asarray(cost, dtype=np.float64)
    k, m = cost.shape
    if k <= m:
        best = min(
            sum(cost[i, perm[i]] for i in range(k))
            for perm in itertools.permutations(range(m), k)
        )
    else:
        best = min(
            sum(cost[perm[j], j] for j in range(m))
            for perm in itertools.permutations(range(k), m)
        )
    return float(best)


def detection_loss(
    preds: Sequence["BoxPrediction"],
    gts: Array,
    weights: LossWeights,
) -> Tensor:
    """Hungarian set loss: focal classification plus smooth-L1 regression.

    `gts` rows are (cx, cy, w, h, heading, class). Matched predictions take a
    positive focal term on their ground-truth class plus regression on the
    box parameters; everything else is trained toward the negative class.
    An empty ground truth gives a pure negative classification loss.
    """
    if not preds:
        raise LossError("detection loss needs at least one prediction")
    tape = preds[0].class_probs.tape
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 6)
    n_classes = preds[0].class_probs.shape[0]
    alpha, gamma = weights.focal_alpha, weights.focal_gamma

    if len(gts):
        cost = np.zeros((len(preds), len(gts)))
        for i, pred in enumerate(preds):
            probs = pred.class_probs.data
            box = pred.box.data
            for j, gt in enumerate(gts):
                cls = int(gt[5])
                cost[i, j] = weights.lambda_cls * focal_value(probs[cls], True, alpha, gamma)
                cost[i, j] += weights.lambda_reg * float(np.abs(box - gt[:5]).sum())
        match = hungarian_match(cost)
    else:
        match = Assignment(pairs=[], unmatched_predictions=list(range(len(preds))))

    gt_class_of = {p: int(gts[g][5]) for p, g in match.pairs}
    cls_terms: list[Tensor] = []
    reg_terms: list[Tensor] = []
    for i, pred in enumerate(preds):
        p = ad.clamp(pred.class_probs, PROB_FLOOR, 1.0 - PROB_FLOOR)
        conf = ad.clamp(pred.objectness, PROB_FLOOR, 1.0 - PROB_FLOOR)
        if i in gt_class_of:
            cls = gt_class_of[i]
            pos = ad.slice_axis(p, 0, cls, cls + 1)
            cls_terms.append(ad.tsum(_focal_pos(pos, alpha, gamma)))
            if n_classes > 1:
                neg_mask = np.ones(n_classes)
                neg_mask[cls] = 0.0
                neg = ad.mul(tape.constant(neg_mask), _focal_neg(p, alpha, gamma))
                cls_terms.append(ad.tsum(neg))
            cls_terms.append(ad.tsum(_focal_pos(conf, alpha, gamma)))
        else:
            cls_terms.append(ad.tsum(_focal_neg(p, alpha, gamma)))
            cls_terms.append(ad.tsum(_focal_neg(conf, alpha, gamma)))

    for i, g in match.pairs:
        residual = ad.sub(preds[i].box, tape.constant(gts[g][:5]))
        reg_terms.append(ad.mean(ad.smooth_l1(residual)))

    cls_total = cls_terms[0]
    for term in cls_terms[1:]:
        cls_total = ad.add(cls_total, term)
    cls_loss = ad.scalar_mul(cls_total, 1.0 / (len(preds) * (n_classes + 1)))

    if reg_terms:
        reg_total = reg_terms[0]
        for term in reg_terms[1:]:
            reg_total = ad.add(reg_total, term)
        reg_loss = ad.scalar_mul(reg_total, 1.0 / len(reg_terms))
    else:
        reg_loss = tape.constant(0.0)

    return ad.add(
        ad.scalar_mul(cls_loss, weights.lambda_cls),
        ad.scalar_mul(reg_loss, weights.lambda_reg),
    )


def total_loss(l_diff, l_seg, l_det, weights: LossWeights):
    """lambda_diff * diffusion + lambda_seg * seg + lambda_det * detection.

    Works on tape tensors during training and plain floats in reports;
    lambda_diff defaults to 1 and exists only as a config override.
    """
    if isinstance(l_diff, Tensor):
        out = ad.scalar_mul(l_diff, weights.lambda_diff)
        out = ad.add(out, ad.scalar_mul(l_seg, weights.lambda_seg))
        return ad.add(out, ad.scalar_mul(l_det, weights.lambda_det))
    return (
        weights.lambda_diff * l_diff
        + weights.lambda_seg * l_seg
        + weights.lambda_det * l_det
    )
