"""Set matching between predicted and ground-truth segments, and the loss.

Each training step assigns every ground-truth segment to a distinct query by
minimum-cost bipartite matching over class score, L1 segment distance, and a
distance-penalized overlap term.  The match itself is computed outside the
autodiff graph; only the loss evaluated at the chosen pairs carries gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import tensor as tc
from .errors import MatchingError, ShapeError
from .tensor import Tensor


@dataclass(frozen=True)
class LossWeights:
    cost_cls: float = 1.0
    cost_l1: float = 1.0
    cost_iou: float = 1.0
    reg_lambda: float = 1.0
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25


@dataclass
class LossBreakdown:
    total: Tensor
    cls: float
    l1: float
    diou: float
    pred_idx: np.ndarray  # matched query per ground-truth segment
    gt_idx: np.ndarray


def tiou_pairwise(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Interval overlap-over-union for every (a_i, b_j) pair; (n, m)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    inter = np.maximum(
        0.0, np.minimum(a[:, None, 1], b[None, :, 1]) - np.maximum(a[:, None, 0], b[None, :, 0])
    )
    union = (a[:, 1] - a[:, 0])[:, None] + (b[:, 1] - b[:, 0])[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def diou_pairwise(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """tIoU minus the squared center gap over the squared enclosing span."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    iou = tiou_pairwise(a, b)
    centers = (a[:, None, 0] + a[:, None, 1] - b[None, :, 0] - b[None, :, 1]) / 2.0
    span = np.maximum(a[:, None, 1], b[None, :, 1]) - np.minimum(a[:, None, 0], b[None, :, 0])
    penalty = np.zeros_like(iou)
    np.divide(centers**2, span**2, out=penalty, where=span > 0)
    return iou - penalty


def matching_cost(
    logits: np.ndarray,
    segments: np.ndarray,
    gt_segments: np.ndarray,
    gt_labels: np.ndarray,
    weights: LossWeights = LossWeights(),
) -> np.ndarray:
    """(num_queries, num_gt) assignment cost table."""
    probs = expit(np.asarray(logits, dtype=np.float64))
    cls_term = -probs[:, np.asarray(gt_labels, dtype=np.intp)]
    l1_term = np.abs(segments[:, None, :] - gt_segments[None, :, :]).sum(axis=2)
    iou_term = 1.0 - diou_pairwise(segments, gt_segments)
    return weights.cost_cls * cls_term + weights.cost_l1 * l1_term + weights.cost_iou * iou_term


def hungarian(cost: np.ndarray) -> np.ndarray:
    """Minimum-cost assignment of each row to a distinct column.

    Needs rows <= columns.  Returns column index per row.  Potential-based
    O(rows^2 * cols); column scans run in ascending index order, so equal-cost
    alternatives resolve the same way every time.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ShapeError(f"cost must be 2-D, got {cost.shape}")
    n, m = cost.shape
    if n > m:
        raise MatchingError(f"cannot assign {n} rows to only {m} columns")
    if n == 0:
        return np.zeros(0, dtype=np.intp)
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    row_of_col = np.zeros(m + 1, dtype=np.intp)  # 0 means free
    way = np.zeros(m + 1, dtype=np.intp)
    for i in range(1, n + 1):
        row_of_col[0] = i
        j0 = 0
        minv = np.full(m + 1, inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = row_of_col[j0]
            delta = inf
            j1 = 0
            for j in range(1, m + 1):
                if used[j]:
                    continue
                cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            u[row_of_col[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if row_of_col[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            row_of_col[j0] = row_of_col[j1]
            j0 = j1
    out = np.zeros(n, dtype=np.intp)
    for j in range(1, m + 1):
        if row_of_col[j]:
            out[row_of_col[j] - 1] = j - 1
    return out


def match(
    logits: Tensor,
    segments: Tensor,
    gt_segments: np.ndarray,
    gt_labels: np.ndarray,
    weights: LossWeights = LossWeights(),
) -> tuple[np.ndarray, np.ndarray]:
    """Matched (query_idx, gt_idx) arrays; the cost never enters the graph."""
    n_gt = len(gt_labels)
    if n_gt == 0:
        return np.zeros(0, dtype=np.intp), np.zeros(0, dtype=np.intp)
    if n_gt > segments.shape[0]:
        raise MatchingError(f"{n_gt} ground-truth segments but only {segments.shape[0]} queries")
    cost = matching_cost(logits.data, segments.data, gt_segments, gt_labels, weights)
    # rows = ground truth so every segment receives a distinct query
    pred_idx = hungarian(cost.T)
    return pred_idx, np.arange(n_gt, dtype=np.intp)


def focal_loss(
    logits: Tensor, pred_idx: np.ndarray, gt_labels: np.ndarray, weights: LossWeights = LossWeights()
) -> Tensor:
    """Per-class sigmoid focal loss averaged over queries.

    Written with sigmoid/softplus so huge logits stay finite:
    positives cost alpha * sigmoid(-x)^gamma * softplus(-x),
    negatives cost (1-alpha) * sigmoid(x)^gamma * softplus(x).
    """
    n_q = logits.shape[0]
    y = np.zeros(logits.shape)
    if len(pred_idx):
        y[pred_idx, np.asarray(gt_labels, dtype=np.intp)] = 1.0
    neg_logits = tc.neg(logits)
    pos = tc.mul(
        weights.focal_alpha,
        tc.mul(tc.pow_const(tc.sigmoid(neg_logits), weights.focal_gamma), tc.softplus(neg_logits)),
    )
    neg = tc.mul(
        1.0 - weights.focal_alpha,
        tc.mul(tc.pow_const(tc.sigmoid(logits), weights.focal_gamma), tc.softplus(logits)),
    )
    per_cell = tc.add(tc.mul(Tensor(y), pos), tc.mul(Tensor(1.0 - y), neg))
    return tc.mul(tc.tensor_sum(per_cell), 1.0 / n_q)


def segment_losses(
    segments: Tensor, pred_idx: np.ndarray, gt_segments: np.ndarray
) -> tuple[Tensor, Tensor]:
    """(sum of L1 gaps, sum of 1 - DIoU) over the matched pairs."""
    matched = tc.take(segments, pred_idx)
    gt = Tensor(np.asarray(gt_segments, dtype=np.float64))
    l1 = tc.tensor_sum(tc.absolute(tc.sub(matched, gt)))

    n = len(pred_idx)
    ts = tc.reshape(tc.take(tc.transpose(matched), np.array([0])), (n,))
    te = tc.reshape(tc.take(tc.transpose(matched), np.array([1])), (n,))
    gs = Tensor(gt_segments[:, 0].copy())
    ge = Tensor(gt_segments[:, 1].copy())
    inter = tc.relu(tc.sub(tc.minimum(te, ge), tc.maximum(ts, gs)))
    union = tc.sub(tc.add(tc.sub(te, ts), tc.sub(ge, gs)), inter)
    iou = tc.div(inter, union)
    center_gap = tc.mul(tc.sub(tc.add(ts, te), tc.add(gs, ge)), 0.5)
    span = tc.sub(tc.maximum(te, ge), tc.minimum(ts, gs))
    penalty = tc.div(tc.pow_const(center_gap, 2.0), tc.pow_const(span, 2.0))
    diou = tc.sub(iou, penalty)
    diou_loss = tc.tensor_sum(tc.sub(1.0, diou))
    return l1, diou_loss


def detection_loss(
    logits: Tensor,
    segments: Tensor,
    gt_segments: np.ndarray,
    gt_labels: np.ndarray,
    weights: LossWeights = LossWeights(),
) -> LossBreakdown:
    """Match, then compose classification and regression terms.

    total = mean focal + reg_lambda / n_matched * (sum(1 - DIoU) + sum L1);
    with nothing matched the regression part is exactly zero.
    """
    gt_segments = np.asarray(gt_segments, dtype=np.float64).reshape(-1, 2)
    gt_labels = np.asarray(gt_labels, dtype=np.intp)
    with tc.no_grad():
        pred_idx, gt_idx = match(logits, segments, gt_segments, gt_labels, weights)
    cls = focal_loss(logits, pred_idx, gt_labels, weights)
    if len(pred_idx) == 0:
        return LossBreakdown(total=cls, cls=cls.item(), l1=0.0, diou=0.0, pred_idx=pred_idx, gt_idx=gt_idx)
    l1, diou_loss = segment_losses(segments, pred_idx, gt_segments)
    scale = weights.reg_lambda / len(pred_idx)
    total = tc.add(cls, tc.mul(tc.add(diou_loss, l1), scale))
    return LossBreakdown(
        total=total,
        cls=cls.item(),
        l1=l1.item() * scale,
        diou=diou_loss.item() * scale,
        pred_idx=pred_idx,
        gt_idx=gt_idx,
    )
