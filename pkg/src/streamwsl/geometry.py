"""Box geometry, non-maximum suppression and Pascal VOC 2007 evaluation."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Dict, Iterable, List, Sequence

import numpy as np

from .errors import InvalidInputError


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise InvalidInputError(f"degenerate box {self.as_tuple()}")
        if not all(math.isfinite(v) for v in self.as_tuple()):
            raise InvalidInputError(f"non-finite box {self.as_tuple()}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_tuple(self):
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def as_array(self) -> np.ndarray:
        return np.array(self.as_tuple(), dtype=float)

    @classmethod
    def from_array(cls, arr) -> "BoundingBox":
        return cls(*(float(v) for v in arr))


@dataclass(frozen=True)
class Annotation:
    box: BoundingBox
    class_id: int
    frame_id: int = 0


@dataclass(frozen=True)
class Detection:
    """A scored box. ``confidence`` is already mapped into [0, 1] by the detector.

    ``region`` is the index of the proposal the detection came from (-1 if unknown).
    """

    box: BoundingBox
    class_id: int
    confidence: float
    frame_id: int = 0
    region: int = -1


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two valid boxes (continuous coordinates)."""
    if a.area <= 0 or b.area <= 0:
        raise InvalidInputError("iou of degenerate box")
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between two ``(N, 4)`` / ``(M, 4)`` arrays of xyxy boxes."""
    a = np.asarray(boxes_a, dtype=float).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=float).reshape(-1, 4)
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def _nms_order(d: Detection):
    return (-d.confidence, d.box.x_min, d.box.y_min)


def nms(dets: Sequence[Detection], iou_thresh: float = 0.3) -> List[Detection]:
    """Greedy per-class NMS.

    Detections are visited by descending confidence (ties: lower x_min, then
    lower y_min); a detection is dropped when it overlaps an already kept box
    of the same class with IoU above ``iou_thresh``.
    """
    if not 0.0 < iou_thresh < 1.0:
        raise InvalidInputError(f"iou_thresh must be in (0, 1), got {iou_thresh}")
    kept: List[Detection] = []
    by_class: Dict[int, List[Detection]] = defaultdict(list)
    for det in sorted(dets, key=_nms_order):
        if any(iou(det.box, k.box) > iou_thresh for k in by_class[det.class_id]):
            continue
        by_class[det.class_id].append(det)
        kept.append(det)
    return kept


def _match_detections(dets: Sequence[Detection], gts: Sequence[Annotation], iou_thresh: float):
    """Return a true-positive flag per detection, in descending-confidence order."""
    gt_by_frame: Dict[int, List[Annotation]] = defaultdict(list)
    for gt in gts:
        gt_by_frame[gt.frame_id].append(gt)
    used = {fid: [False] * len(v) for fid, v in gt_by_frame.items()}

    # stable sort keeps input order among equal confidences
    ordered = sorted(dets, key=lambda d: -d.confidence)
    tp = np.zeros(len(ordered))
    for i, det in enumerate(ordered):
        candidates = gt_by_frame.get(det.frame_id, [])
        best, best_j = -1.0, -1
        for j, gt in enumerate(candidates):
            if gt.class_id != det.class_id:
                continue
            ov = iou(det.box, gt.box)
            if ov > best:
                best, best_j = ov, j
        if best >= iou_thresh and not used[det.frame_id][best_j]:
            used[det.frame_id][best_j] = True
            tp[i] = 1.0
    return tp


def precision_recall(dets: Sequence[Detection], gts: Sequence[Annotation], iou_thresh: float = 0.5):
    """Cumulative precision / recall arrays over detections ranked by confidence."""
    tp = _match_detections(dets, gts, iou_thresh)
    fp = 1.0 - tp
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(fp)
    n_pos = len(gts)
    recall = tp_cum / n_pos if n_pos else np.zeros_like(tp_cum)
    precision = tp_cum / np.maximum(tp_cum + fp_cum, np.finfo(float).eps)
    return precision, recall


def voc_ap_2007(dets: Sequence[Detection], gts: Sequence[Annotation], iou_thresh: float = 0.5) -> float:
    """11-point interpolated AP for a single class.

    Matching is per frame (``frame_id``); each ground truth box can be claimed
    once, by the highest-confidence detection whose best-overlapping box it is.
    A detection whose best match was already taken counts as a false positive,
    as in the VOC devkit.
    """
    if not gts:
        return 0.0
    if not dets:
        return 0.0
    tp_cum = np.cumsum(_match_detections(dets, gts, iou_thresh))
    precision = tp_cum / np.arange(1, len(tp_cum) + 1)
    n_pos = len(gts)
    ap = 0.0
    for step in range(11):
        # recall >= step/10, compared in integers to avoid 0.1-grid rounding
        mask = tp_cum * 10 >= step * n_pos
        ap += float(np.max(precision[mask])) if mask.any() else 0.0
    return ap / 11.0


def per_class_ap(
    dets: Iterable[Detection],
    gts: Iterable[Annotation],
    iou_thresh: float = 0.5,
) -> Dict[int, float]:
    """AP per class present in either detections or ground truth.

    Classes with detections but no ground truth score 0; classes with neither
    do not appear in the result.
    """
    det_by_class: Dict[int, List[Detection]] = defaultdict(list)
    gt_by_class: Dict[int, List[Annotation]] = defaultdict(list)
    for d in dets:
        det_by_class[d.class_id].append(d)
    for g in gts:
        gt_by_class[g.class_id].append(g)
    classes = sorted(set(det_by_class) | set(gt_by_class))
    return {c: voc_ap_2007(det_by_class[c], gt_by_class[c], iou_thresh) for c in classes}


def map_score(per_class: Sequence[float]) -> float:
    values = list(per_class)
    if not values:
        raise InvalidInputError("mAP over an empty class set")
    return float(sum(values) / len(values))
