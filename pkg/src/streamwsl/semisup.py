"""Pseudo-labeling policies for frames the model is already confident about."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, InvalidInputError
from .frames import Frame
from .geometry import Annotation, Detection, iou_matrix
from .scoring import ConsistencyScore

SS_BASELINE = "ss_baseline"
SS_POS_ONLY = "ss_pos_only"
SSL_VARIANTS = (SS_BASELINE, SS_POS_ONLY)


@dataclass(frozen=True)
class SslConfig:
    variant: str = SS_POS_ONLY
    tau_ss: float = 0.6
    confidence_min: float = 0.8
    negative_iou: float = 0.3

    def __post_init__(self):
        if self.variant not in SSL_VARIANTS:
            raise ConfigError(f"unknown SSL variant {self.variant!r}; expected one of {SSL_VARIANTS}")


@dataclass(frozen=True)
class PseudoLabel:
    frame_id: int
    positive_annotations: Tuple[Annotation, ...]
    negative_regions: Tuple[int, ...]  # region indices of the frame asserted as background
    provenance: str


def ss_decide(frame: Frame, dets: Sequence[Detection], score: ConsistencyScore, cfg: SslConfig) -> Optional[PseudoLabel]:
    """Turn a confidently scored frame into pseudo ground truth, or return None.

    ``ss_baseline`` also marks every region that overlaps no confident
    detection as background; ``ss_pos_only`` keeps only the positives.
    """
    if score.value < cfg.tau_ss:
        return None
    positives = tuple(
        Annotation(d.box, d.class_id, frame.frame_id) for d in dets if d.confidence >= cfg.confidence_min
    )
    if cfg.variant == SS_POS_ONLY:
        if not positives:
            return None
        return PseudoLabel(frame.frame_id, positives, (), SS_POS_ONLY)

    if frame.n_regions == 0:
        negatives: Tuple[int, ...] = ()
    elif positives:
        ov = iou_matrix(frame.boxes, np.array([a.box.as_tuple() for a in positives]))
        negatives = tuple(int(i) for i in np.flatnonzero(ov.max(axis=1) < cfg.negative_iou))
    else:
        negatives = tuple(range(frame.n_regions))
    return PseudoLabel(frame.frame_id, positives, negatives, SS_BASELINE)


def ss_fraction(selected: int, total: int) -> float:
    if total < 1:
        raise InvalidInputError("total must be >= 1")
    return selected / total
