"""Anchor assignment, the two-task loss, and AP@IoU evaluation.

One square anchor per feature cell, side = 4x the level stride. Matching
is IoU-threshold based with a forced claim so no annotated box goes
unrepresented; the loss is mean softmax cross-entropy over a mined
3:1 negative:positive sample plus smooth-L1 on the positives' box deltas.
Evaluation is the usual greedy PR sweep with the area under the
interpolated precision envelope at IoU 0.5.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, ContractError
from .pyramid import PyramidSpec, level_sizes
from .tensor import Tensor, add, scale, smooth_l1_loss, softmax_cross_entropy, take_rows

LABEL_NEGATIVE = -1
LABEL_IGNORE = -2


@dataclass
class Anchors:
    """Column arrays over all levels; order is level-major, then row-major cells."""

    level: np.ndarray  # pyramid level number (2..7)
    cx: np.ndarray
    cy: np.ndarray
    w: np.ndarray
    h: np.ndarray

    def __len__(self):
        return self.cx.shape[0]

    def as_xywh(self) -> np.ndarray:
        return np.stack([self.cx - self.w / 2, self.cy - self.h / 2, self.w, self.h], axis=1)


@dataclass
class GroundTruthBox:
    x: float
    y: float
    w: float
    h: float
    image_id: int = 0


@dataclass
class Detection:
    x: float
    y: float
    w: float
    h: float
    score: float
    image_id: int = 0


@dataclass
class MatchResult:
    """labels[a] holds a ground-truth index, LABEL_NEGATIVE, or LABEL_IGNORE.

    regression_targets holds encode(anchor, matched_gt) rows for every
    anchor, meaningful only where the label is a ground-truth index.
    """

    labels: np.ndarray
    regression_targets: np.ndarray

    @property
    def positive_indices(self) -> np.ndarray:
        return np.flatnonzero(self.labels >= 0)

    @property
    def negative_indices(self) -> np.ndarray:
        return np.flatnonzero(self.labels == LABEL_NEGATIVE)


def generate_anchors(spec: PyramidSpec, image_size: Tuple[int, int]) -> Anchors:
    """One square anchor per cell, side 4*stride, centered on the cell."""
    spec.validate()
    sizes = level_sizes(image_size)
    levels, cxs, cys, ws = [], [], [], []
    for lvl, stride, (fh, fw) in zip(spec.levels, spec.strides, sizes):
        side = 4.0 * stride
        ys, xs = np.mgrid[0:fh, 0:fw]
        cxs.append((xs.reshape(-1) + 0.5) * stride)
        cys.append((ys.reshape(-1) + 0.5) * stride)
        ws.append(np.full(fh * fw, side))
        levels.append(np.full(fh * fw, lvl, dtype=np.int64))
    w = np.concatenate(ws)
    return Anchors(
        level=np.concatenate(levels),
        cx=np.concatenate(cxs).astype(np.float64),
        cy=np.concatenate(cys).astype(np.float64),
        w=w,
        h=w.copy(),
    )


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    """Intersection over union of two (x, y, w, h) boxes."""
    m = iou_matrix(np.asarray(a, dtype=np.float64)[None, :], np.asarray(b, dtype=np.float64)[None, :])
    return float(m[0, 0])


def iou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of (x, y, w, h) rows: result[i, j] = IoU(a_i, b_j)."""
    ax0, ay0 = boxes_a[:, 0:1], boxes_a[:, 1:2]
    ax1, ay1 = ax0 + boxes_a[:, 2:3], ay0 + boxes_a[:, 3:4]
    bx0, by0 = boxes_b[None, :, 0], boxes_b[None, :, 1]
    bx1, by1 = bx0 + boxes_b[None, :, 2], by0 + boxes_b[None, :, 3]
    iw = np.maximum(0.0, np.minimum(ax1, bx1) - np.maximum(ax0, bx0))
    ih = np.maximum(0.0, np.minimum(ay1, by1) - np.maximum(ay0, by0))
    inter = iw * ih
    union = boxes_a[:, 2:3] * boxes_a[:, 3:4] + (boxes_b[None, :, 2] * boxes_b[None, :, 3]) - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def match_anchors(
    anchors: Anchors,
    gts: Sequence[GroundTruthBox],
    pos_thresh: float = 0.35,
    neg_thresh: float = 0.3,
) -> MatchResult:
    """Assign every anchor a label and positives their regression target.

    Rules, in order:
      1. Each anchor takes its highest-IoU ground truth (ties: lowest
         index): positive if IoU >= pos_thresh, negative if IoU < neg_thresh,
         ignored in between.
      2. Each ground truth, in index order, claims its highest-IoU anchor
         (ties: lowest anchor index) among anchors not force-claimed by an
         earlier ground truth, provided that IoU > 0. The claim overrides
         rule 1 for that anchor.
    """
    if not 0 <= neg_thresh <= pos_thresh <= 1:
        raise ConfigError(f"need 0 <= neg ({neg_thresh}) <= pos ({pos_thresh}) <= 1")
    n = len(anchors)
    if n == 0:
        raise ContractError("match_anchors called with no anchors")
    labels = np.full(n, LABEL_NEGATIVE, dtype=np.int64)
    targets = np.zeros((n, 4))
    if len(gts) == 0:
        return MatchResult(labels, targets)

    gt_boxes = np.array([[g.x, g.y, g.w, g.h] for g in gts])
    overlap = iou_matrix(anchors.as_xywh(), gt_boxes)

    best_gt = overlap.argmax(axis=1)
    best_iou = overlap[np.arange(n), best_gt]
    labels[best_iou >= pos_thresh] = best_gt[best_iou >= pos_thresh]
    labels[(best_iou >= neg_thresh) & (best_iou < pos_thresh)] = LABEL_IGNORE

    claimed = np.zeros(n, dtype=bool)
    for g in range(len(gts)):
        col = overlap[:, g].copy()
        col[claimed] = -1.0
        a = int(col.argmax())
        if col[a] > 0:
            labels[a] = g
            claimed[a] = True

    pos = labels >= 0
    if pos.any():
        idx = np.flatnonzero(pos)
        targets[idx] = encode_boxes(
            anchors.cx[idx], anchors.cy[idx], anchors.w[idx], anchors.h[idx],
            gt_boxes[labels[idx]],
        )
    return MatchResult(labels, targets)


def encode_boxes(acx, acy, aw, ah, gt_xywh: np.ndarray) -> np.ndarray:
    gcx = gt_xywh[..., 0] + gt_xywh[..., 2] / 2
    gcy = gt_xywh[..., 1] + gt_xywh[..., 3] / 2
    return np.stack(
        [
            (gcx - acx) / aw,
            (gcy - acy) / ah,
            np.log(gt_xywh[..., 2] / aw),
            np.log(gt_xywh[..., 3] / ah),
        ],
        axis=-1,
    )


def decode_boxes(acx, acy, aw, ah, deltas: np.ndarray) -> np.ndarray:
    """Inverse of encode_boxes; returns (x, y, w, h) rows."""
    cx = acx + deltas[..., 0] * aw
    cy = acy + deltas[..., 1] * ah
    w = np.exp(deltas[..., 2]) * aw
    h = np.exp(deltas[..., 3]) * ah
    return np.stack([cx - w / 2, cy - h / 2, w, h], axis=-1)


def encode(anchor, gt: GroundTruthBox) -> np.ndarray:
    """Deltas (dx/wa, dy/ha, log w/wa, log h/ha) for one anchor/box pair."""
    acx, acy, aw, ah = anchor
    return encode_boxes(acx, acy, aw, ah, np.array([gt.x, gt.y, gt.w, gt.h]))


def decode(anchor, deltas: np.ndarray) -> np.ndarray:
    acx, acy, aw, ah = anchor
    return decode_boxes(acx, acy, aw, ah, np.asarray(deltas))


def select_training_sample(
    match: MatchResult,
    cls_scores: np.ndarray,
    neg_pos_ratio: int = 3,
    min_negatives: int = 8,
) -> np.ndarray:
    """Indices of all positives plus the hardest negatives (highest face score).

    Deterministic: negatives sort by (-score, index).
    """
    pos = match.positive_indices
    neg = match.negative_indices
    want = max(int(neg_pos_ratio) * len(pos), min_negatives)
    if len(neg) > want:
        hardness = cls_scores[neg]
        order = np.lexsort((neg, -hardness))
        neg = neg[order[:want]]
        neg = np.sort(neg)
    return np.concatenate([pos, neg])


def detection_loss(
    cls_logits: Tensor,
    reg_preds: Tensor,
    match: MatchResult,
    loss_lambda: float = 1.0,
    neg_pos_ratio: int = 3,
    sample: Optional[np.ndarray] = None,
) -> Tensor:
    """Mean softmax CE over the sample + lambda * mean smooth-L1 on positives.

    Class 1 is "object". With no positive anchors the box term is zero.
    ``sample`` pins the mined subset (the miner reads the current logits,
    which finite-difference checks must hold fixed).
    """
    if cls_logits.shape[0] != match.labels.shape[0]:
        raise ConfigError(
            f"{cls_logits.shape[0]} logit rows vs {match.labels.shape[0]} anchors"
        )
    if sample is None:
        face_score = cls_logits.data[:, 1] - cls_logits.data[:, 0]
        sample = select_training_sample(match, face_score, neg_pos_ratio)
    cls_rows = take_rows(cls_logits, sample)
    cls_targets = (match.labels[sample] >= 0).astype(np.int64)
    loss = softmax_cross_entropy(cls_rows, cls_targets)

    pos = match.positive_indices
    if len(pos):
        reg_rows = take_rows(reg_preds, pos)
        reg_loss = smooth_l1_loss(reg_rows, match.regression_targets[pos])
        loss = add(loss, scale(reg_loss, loss_lambda))
    return loss


def nms(dets: List[Detection], iou_thresh: float) -> List[Detection]:
    """Greedy suppression; keep order and ties break by (score desc, x, y)."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, dets[i].x, dets[i].y))
    kept: List[int] = []
    boxes = np.array([[d.x, d.y, d.w, d.h] for d in dets]) if dets else np.zeros((0, 4))
    for i in order:
        box = boxes[i:i + 1]
        if all(iou_matrix(box, boxes[j:j + 1])[0, 0] <= iou_thresh for j in kept):
            kept.append(i)
    return [dets[i] for i in kept]


def evaluate_ap(
    dets: List[Detection],
    gts: List[GroundTruthBox],
    iou_thresh: float = 0.5,
) -> Tuple[float, List[Tuple[float, float]]]:
    """AP and the raw (recall, precision) curve, pooled across images.

    Detections are processed in (score desc, x, y) order; each claims the
    highest-IoU unclaimed ground truth of its image at IoU >= iou_thresh
    (ties: lowest index). AP integrates the interpolated precision envelope
    over recall. No ground truths, or no detections, gives AP 0.
    """
    if not dets or not gts:
        return 0.0, []
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, dets[i].x, dets[i].y))
    gt_by_image: dict = {}
    for gi, g in enumerate(gts):
        gt_by_image.setdefault(g.image_id, []).append(gi)
    gt_boxes = np.array([[g.x, g.y, g.w, g.h] for g in gts])
    claimed = np.zeros(len(gts), dtype=bool)

    tp = np.zeros(len(dets))
    for rank, di in enumerate(order):
        d = dets[di]
        best_gi, best = -1, -1.0
        for gi in gt_by_image.get(d.image_id, ()):
            if claimed[gi]:
                continue
            ov = iou_matrix(np.array([[d.x, d.y, d.w, d.h]]), gt_boxes[gi:gi + 1])[0, 0]
            if ov >= iou_thresh and ov > best:
                best, best_gi = ov, gi
        if best_gi >= 0:
            claimed[best_gi] = True
            tp[rank] = 1.0

    cum_tp = np.cumsum(tp)
    ranks = np.arange(1, len(dets) + 1)
    recall = cum_tp / len(gts)
    precision = cum_tp / ranks
    curve = list(zip(recall.tolist(), precision.tolist()))

    # area under the interpolated envelope
    mrec = np.concatenate([[0.0], recall])
    mpre = np.concatenate([[0.0], precision])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    ap = float(np.sum((mrec[1:] - mrec[:-1]) * mpre[1:]))
    return ap, curve


def write_pr_curve(path, curve: List[Tuple[float, float]]) -> None:
    with open(path, "w") as fh:
        fh.write("recall,precision\n")
        for r, p in curve:
            fh.write(f"{r:.9f},{p:.9f}\n")
