"""Box geometry, non-maximum suppression and VOC-style average precision.

Boxes are stored in center format ``(cx, cy, w, h)`` everywhere; corner
coordinates only appear inside the overlap computations.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_MATCH_IOU = 0.5
DEFAULT_NMS_THRESHOLD = 0.3


@dataclass(frozen=True)
class BoundingBox:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        vals = (self.cx, self.cy, self.w, self.h)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box coordinates: {vals}")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box must have positive size, got w={self.w} h={self.h}")

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float) -> "BoundingBox":
        return cls((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)

    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2.0, self.cy - self.h / 2.0,
                self.cx + self.w / 2.0, self.cy + self.h / 2.0)

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)

    @property
    def area(self) -> float:
        return self.w * self.h


@dataclass(frozen=True)
class ScoredBox:
    box: BoundingBox
    score: float
    frame_id: int = 0
    class_id: int = 0

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ValueError(f"non-finite detection score {self.score}")


@dataclass(frozen=True)
class GroundTruthBox:
    box: BoundingBox
    class_id: int = 0
    frame_id: int = 0


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection-over-union of two boxes."""
    if a == b:
        return 1.0
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def boxes_to_array(boxes: Sequence[BoundingBox]) -> np.ndarray:
    if len(boxes) == 0:
        return np.zeros((0, 4))
    return np.array([[b.cx, b.cy, b.w, b.h] for b in boxes], dtype=np.float64)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between two ``(N, 4)`` / ``(M, 4)`` center-format arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ax1 = a[:, 0] - a[:, 2] / 2
    ay1 = a[:, 1] - a[:, 3] / 2
    ax2 = a[:, 0] + a[:, 2] / 2
    ay2 = a[:, 1] + a[:, 3] / 2
    bx1 = b[:, 0] - b[:, 2] / 2
    by1 = b[:, 1] - b[:, 3] / 2
    bx2 = b[:, 0] + b[:, 2] / 2
    by2 = b[:, 1] + b[:, 3] / 2
    iw = np.minimum(ax2[:, None], bx2[None, :]) - np.maximum(ax1[:, None], bx1[None, :])
    ih = np.minimum(ay2[:, None], by2[None, :]) - np.maximum(ay1[:, None], by1[None, :])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None, :] - inter
    out = inter / union
    # exact 1.0 on identical boxes regardless of rounding in the corner transform
    same = np.all(a[:, None, :] == b[None, :, :], axis=2)
    out[same] = 1.0
    return out


def nms_order(boxes: np.ndarray, scores: np.ndarray, overlap_threshold: float,
              frame_ids: np.ndarray | None = None) -> list[int]:
    """Greedy NMS over arrays; returns kept indices in descending score order.

    Ties in score go to the lower frame id, then the lower input index.
    """
    n = len(scores)
    if n == 0:
        return []
    scores = np.asarray(scores, dtype=np.float64)
    if frame_ids is None:
        frame_ids = np.zeros(n, dtype=np.int64)
    order = np.lexsort((np.arange(n), np.asarray(frame_ids), -scores))
    overlaps = iou_matrix(boxes, boxes)
    alive = np.ones(n, dtype=bool)
    keep = []
    for i in order:
        if not alive[i]:
            continue
        keep.append(int(i))
        alive &= ~(overlaps[i] > overlap_threshold)
    return keep


def nms(dets: Sequence[ScoredBox], overlap_threshold: float = DEFAULT_NMS_THRESHOLD) -> list[ScoredBox]:
    """Greedy non-maximum suppression; output sorted by descending score."""
    if not dets:
        return []
    boxes = boxes_to_array([d.box for d in dets])
    scores = np.array([d.score for d in dets])
    frames = np.array([d.frame_id for d in dets])
    return [dets[i] for i in nms_order(boxes, scores, overlap_threshold, frames)]


def match_detections(dets: Sequence[ScoredBox], gts: Sequence[GroundTruthBox],
                     iou_threshold: float = DEFAULT_MATCH_IOU) -> tuple[np.ndarray, int]:
    """Greedy VOC matching.

    Returns a boolean true-positive flag per detection, in descending score
    order (ties: lower frame id, then input order), and the GT count.
    """
    n = len(dets)
    if n == 0:
        return np.zeros(0, dtype=bool), len(gts)
    scores = np.array([d.score for d in dets])
    frames = np.array([d.frame_id for d in dets])
    order = np.lexsort((np.arange(n), frames, -scores))

    by_frame: dict[int, list[int]] = {}
    for j, g in enumerate(gts):
        by_frame.setdefault(g.frame_id, []).append(j)
    used = np.zeros(len(gts), dtype=bool)
    tp = np.zeros(n, dtype=bool)
    for rank, i in enumerate(order):
        d = dets[i]
        best, best_j = -1.0, -1
        for j in by_frame.get(d.frame_id, ()):
            o = iou(d.box, gts[j].box)
            if o > best:
                best, best_j = o, j
        if best_j >= 0 and best >= iou_threshold and not used[best_j]:
            used[best_j] = True
            tp[rank] = True
    return tp, len(gts)


def average_precision(dets: Sequence[ScoredBox], gts: Sequence[GroundTruthBox],
                      iou_threshold: float = DEFAULT_MATCH_IOU) -> float:
    """All-point interpolated average precision.

    A detection is matched to the highest-IoU ground truth in its frame; it
    counts as a true positive when that IoU reaches ``iou_threshold`` and the
    ground truth has not been claimed by a higher-scoring detection.
    """
    tp, n_gt = match_detections(dets, gts, iou_threshold)
    if n_gt == 0:
        logger.info("average_precision: no ground truth boxes, AP defined as 0")
        return 0.0
    if len(tp) == 0:
        return 0.0
    # precision values are ratios of counts; summing them as fractions makes
    # the result the correctly rounded exact AP
    ctp = np.cumsum(tp)
    total = Fraction(0)
    best = Fraction(0)
    for k in range(len(tp) - 1, -1, -1):
        best = max(best, Fraction(int(ctp[k]), k + 1))
        if tp[k]:
            total += best
    return float(total / n_gt)
