"""Frames, region features and the JSON Lines dataset format.

A dataset file is JSON Lines, optionally gzip-compressed (``.gz`` suffix).
The first record is a header::

    {"format": "streamwsl-frames", "version": 1, "feature_dim": 16,
     "num_classes": 5, "split": "target_stream", "meta": {...}}

Every following record is one frame::

    {"id": 12, "position": 3,
     "regions": [{"box": [x0, y0, x1, y1], "feature": [f0, ..., f15]}, ...],
     "gt": [{"box": [x0, y0, x1, y1], "class_id": 2}, ...]}

``gt`` may be omitted for truly unlabeled data; ``position`` defaults to the
record index.
"""

from __future__ import annotations

import gzip
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import InvalidInputError
from .geometry import Annotation, BoundingBox

FORMAT_NAME = "streamwsl-frames"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class RegionFeature:
    vector: np.ndarray
    source_box: BoundingBox
    frame_id: int


@dataclass(eq=False)
class Frame:
    """One stream element: proposal boxes with their features.

    ``boxes`` is ``(R, 4)`` xyxy, ``features`` is ``(R, d)``. ``hidden_gt`` is
    only read by label oracles and diagnostics, never by selection policies.
    """

    frame_id: int
    position: int
    boxes: np.ndarray
    features: np.ndarray
    hidden_gt: Tuple[Annotation, ...] = field(default_factory=tuple)

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=float).reshape(-1, 4)
        self.features = np.asarray(self.features, dtype=float)
        if self.features.ndim != 2 or len(self.features) != len(self.boxes):
            raise InvalidInputError(
                f"frame {self.frame_id}: {len(self.boxes)} boxes vs features {self.features.shape}"
            )
        if not np.all(np.isfinite(self.features)):
            raise InvalidInputError(f"frame {self.frame_id}: non-finite features")
        self.hidden_gt = tuple(self.hidden_gt)

    @property
    def n_regions(self) -> int:
        return len(self.boxes)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def region(self, i: int) -> RegionFeature:
        return RegionFeature(self.features[i], BoundingBox.from_array(self.boxes[i]), self.frame_id)

    @property
    def regions(self) -> List[RegionFeature]:
        return [self.region(i) for i in range(self.n_regions)]

    def gt_boxes(self) -> np.ndarray:
        return np.array([a.box.as_tuple() for a in self.hidden_gt], dtype=float).reshape(-1, 4)

    def image_feature(self) -> np.ndarray:
        """Mean of the region features; used as the image-level descriptor."""
        if self.n_regions == 0:
            return np.zeros(self.feature_dim)
        return self.features.mean(axis=0)


def _open(path: Path, mode: str):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, mode + "t", encoding="utf-8")
    return open(path, mode, encoding="utf-8")


def frame_to_record(frame: Frame, include_gt: bool = True) -> Dict:
    rec = {
        "id": int(frame.frame_id),
        "position": int(frame.position),
        "regions": [
            {"box": [float(v) for v in b], "feature": [float(v) for v in f]}
            for b, f in zip(frame.boxes, frame.features)
        ],
    }
    if include_gt:
        rec["gt"] = [{"box": list(a.box.as_tuple()), "class_id": int(a.class_id)} for a in frame.hidden_gt]
    return rec


def frame_from_record(rec: Dict, position: int, feature_dim: Optional[int] = None) -> Frame:
    fid = int(rec["id"])
    regions = rec.get("regions", [])
    boxes = np.array([r["box"] for r in regions], dtype=float).reshape(-1, 4)
    if regions:
        features = np.array([r["feature"] for r in regions], dtype=float)
    else:
        features = np.zeros((0, feature_dim or 0))
    if feature_dim is not None and features.shape[1] != feature_dim:
        raise InvalidInputError(f"frame {fid}: feature dim {features.shape[1]} != header {feature_dim}")
    gt = tuple(
        Annotation(BoundingBox.from_array(g["box"]), int(g["class_id"]), fid) for g in rec.get("gt", [])
    )
    return Frame(fid, int(rec.get("position", position)), boxes, features, gt)


def write_frames(
    path,
    frames: Sequence[Frame],
    num_classes: int,
    split: str = "",
    include_gt: bool = True,
    meta: Optional[Dict] = None,
) -> None:
    dim = frames[0].feature_dim if frames else 0
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "feature_dim": dim,
        "num_classes": num_classes,
        "split": split,
        "meta": meta or {},
    }
    with _open(Path(path), "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for frame in frames:
            fh.write(json.dumps(frame_to_record(frame, include_gt)) + "\n")


def read_frames(path) -> Tuple[Dict, List[Frame]]:
    """Load a dataset file; returns ``(header, frames)``."""
    frames: List[Frame] = []
    with _open(Path(path), "r") as fh:
        lines = (line for line in fh if line.strip())
        try:
            header = json.loads(next(lines))
        except StopIteration:
            raise InvalidInputError(f"{path}: empty dataset file") from None
        if header.get("format") != FORMAT_NAME:
            raise InvalidInputError(f"{path}: not a {FORMAT_NAME} file")
        if int(header.get("version", -1)) > FORMAT_VERSION:
            raise InvalidInputError(f"{path}: unsupported version {header.get('version')}")
        dim = header.get("feature_dim") or None
        for i, line in enumerate(lines):
            frames.append(frame_from_record(json.loads(line), i, dim))
    return header, frames


def all_annotations(frames: Iterable[Frame]) -> List[Annotation]:
    return [a for f in frames for a in f.hidden_gt]
