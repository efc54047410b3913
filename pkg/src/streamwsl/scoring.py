"""Image-level scores for predictions on unlabeled frames.

``civ_score`` is a cross-image validation score: every detection's region is
transplanted into a few labeled frames and re-detected there. A detection the
model can re-find with the same class in an unrelated, known scene is
considered consistent. This is one concrete instantiation of a consistency
score; it makes no claim to match any particular published formula.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .detector import DetectorModel, detect_from_margins
from .errors import InvalidInputError
from .frames import Frame
from .geometry import BoundingBox, Detection, iou, iou_matrix

PLACEMENT_ATTEMPTS = 50
PLACEMENT_MAX_IOU = 0.2
REDETECT_MIN_IOU = 0.5


@dataclass(frozen=True)
class ConsistencyScore:
    value: float
    n_stitches: int
    agreements: Tuple[float, ...] = ()
    empty: bool = False
    placement_fallbacks: int = 0


class UncertaintyScore(float):
    """A float where higher means less confident. Policies read its direction from the type."""


def uncertainty_score(dets: Sequence[Detection]) -> UncertaintyScore:
    """1 - max confidence; 1.0 when nothing was detected."""
    if not dets:
        return UncertaintyScore(1.0)
    return UncertaintyScore(1.0 - max(d.confidence for d in dets))


def _source_region(frame: Frame, det: Detection) -> int:
    if 0 <= det.region < frame.n_regions:
        return det.region
    ov = iou_matrix(det.box.as_array()[None], frame.boxes)[0]
    return int(np.argmax(ov))


def _place_box(w: float, h: float, host: Frame, rng: np.random.Generator) -> Tuple[np.ndarray, bool]:
    """Uniform random placement inside the host's extent, away from its GT boxes."""
    extent_w = max(float(host.boxes[:, 2].max()) if host.n_regions else w, w)
    extent_h = max(float(host.boxes[:, 3].max()) if host.n_regions else h, h)
    gt = host.gt_boxes()
    box = None
    for _ in range(PLACEMENT_ATTEMPTS):
        x0 = rng.uniform(0.0, extent_w - w) if extent_w > w else 0.0
        y0 = rng.uniform(0.0, extent_h - h) if extent_h > h else 0.0
        box = np.array([x0, y0, x0 + w, y0 + h])
        if len(gt) == 0 or iou_matrix(box[None], gt).max() < PLACEMENT_MAX_IOU:
            return box, True
    return box, False


class CivScorer:
    """Cross-image validation against a fixed labeled pool and model.

    Region margins of the pool frames are computed once and reused for every
    stitch; a stitched frame's detections are then identical to running
    ``detect`` on the host frame with the transplanted region appended.
    """

    def __init__(self, model: DetectorModel, labeled_pool: Sequence[Frame], n_stitches: int = 3, seed: int = 0):
        if n_stitches < 1:
            raise InvalidInputError("need at least one stitch per detection")
        if not labeled_pool:
            raise InvalidInputError("labeled pool is empty")
        self.model = model
        self.pool = list(labeled_pool)
        self.n_stitches = n_stitches
        self.seed = seed
        self._pool_margins: Dict[int, np.ndarray] = {}

    def _margins(self, i: int) -> np.ndarray:
        if i not in self._pool_margins:
            host = self.pool[i]
            self._pool_margins[i] = (
                self.model.margins(host.features) if host.n_regions else np.zeros((0, self.model.num_classes))
            )
        return self._pool_margins[i]

    def _agreement(self, feature: np.ndarray, margin: np.ndarray, class_id: int, w: float, h: float,
                   host_idx: int, rng: np.random.Generator) -> Tuple[float, bool]:
        host = self.pool[host_idx]
        box, placed = _place_box(w, h, host, rng)
        stitched = Frame(
            -1,
            -1,
            np.vstack([host.boxes, box[None]]),
            np.vstack([host.features.reshape(-1, self.model.feature_dim), feature[None]]),
        )
        margins = np.vstack([self._margins(host_idx), margin[None]])
        target = BoundingBox.from_array(box)
        best = 0.0
        for det in detect_from_margins(self.model, stitched, margins):
            if det.class_id == class_id and iou(det.box, target) >= REDETECT_MIN_IOU:
                best = max(best, det.confidence)
        return best, placed

    def score(self, frame: Frame, dets: Sequence[Detection], rng_seed=None) -> ConsistencyScore:
        if not dets:
            return ConsistencyScore(0.0, 0, (), empty=True)
        if rng_seed is None:
            rng_seed = [self.seed, frame.frame_id]
        rng = np.random.default_rng(rng_seed)
        per_det: List[float] = []
        fallbacks = 0
        for det in dets:
            r = _source_region(frame, det)
            feature = frame.features[r]
            margin = self.model.margins(feature[None])[0]
            w = frame.boxes[r, 2] - frame.boxes[r, 0]
            h = frame.boxes[r, 3] - frame.boxes[r, 1]
            hosts = rng.integers(0, len(self.pool), size=self.n_stitches)
            total = 0.0
            for host_idx in hosts:
                a, placed = self._agreement(feature, margin, det.class_id, w, h, int(host_idx), rng)
                total += a
                fallbacks += not placed
            per_det.append(total / self.n_stitches)
        return ConsistencyScore(
            float(np.mean(per_det)),
            self.n_stitches * len(dets),
            tuple(per_det),
            empty=False,
            placement_fallbacks=fallbacks,
        )


def civ_score(
    frame: Frame,
    dets: Sequence[Detection],
    labeled_pool: Sequence[Frame],
    model: DetectorModel,
    J: int = 3,
    rng_seed=0,
) -> ConsistencyScore:
    """Consistency of ``dets`` under transplantation into ``J`` labeled frames each."""
    return CivScorer(model, labeled_pool, J).score(frame, dets, rng_seed)
