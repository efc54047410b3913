"""Learning protocol: supervised seed phase, then one weakly-supervised pass."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Protocol, Sequence, Tuple

import numpy as np

from .active import AlPolicyConfig, Decision, StreamSelector, pool_select_kmeans, pool_select_uniform, is_uncertain
from .detector import DetectorModel, MinibootstrapParams, detect, minibootstrap_train
from .errors import ContractViolation, InvalidInputError, TrainingError
from .frames import Frame
from .geometry import Annotation, iou_matrix, map_score, per_class_ap
from .scoring import CivScorer, ConsistencyScore
from .semisup import SS_BASELINE, PseudoLabel, SslConfig, ss_decide, ss_fraction

logger = logging.getLogger(__name__)

POSITIVE_IOU = 0.5
NEGATIVE_IOU = 0.3
REFINER_IOU = 0.6


@dataclass(frozen=True)
class LabeledFrame:
    """A frame plus the labels the learner is allowed to see.

    ``negatives`` lists region indices asserted as background. ``None`` means
    the frame is fully annotated, so background is every region with IoU
    below 0.3 to all annotations.
    """

    frame: Frame
    annotations: Tuple[Annotation, ...]
    negatives: Optional[Tuple[int, ...]] = None
    source: str = "seed"


class LabeledSet:
    """Append-only collection of labeled frames."""

    def __init__(self, entries: Iterable[LabeledFrame] = ()):
        self._entries: List[LabeledFrame] = list(entries)

    @classmethod
    def from_frames(cls, frames: Iterable[Frame], source: str = "seed") -> "LabeledSet":
        return cls(LabeledFrame(f, tuple(f.hidden_gt), None, source) for f in frames)

    def add(self, entry: LabeledFrame) -> None:
        self._entries.append(entry)

    def copy(self) -> "LabeledSet":
        return LabeledSet(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[LabeledFrame]:
        return iter(self._entries)

    @property
    def frames(self) -> List[Frame]:
        return [e.frame for e in self._entries]

    def annotations(self) -> List[Annotation]:
        return [a for e in self._entries for a in e.annotations]

    def training_data(self, num_classes: int):
        """Split regions into per-class positives, background and refiner pairs."""
        pos: List[List[np.ndarray]] = [[] for _ in range(num_classes)]
        neg: List[np.ndarray] = []
        ref_x, ref_p, ref_g = [], [], []
        dim = None
        for e in self._entries:
            f = e.frame
            if f.n_regions == 0:
                continue
            dim = f.feature_dim
            if e.annotations:
                gt = np.array([a.box.as_tuple() for a in e.annotations])
                ov = iou_matrix(f.boxes, gt)
                best = ov.argmax(axis=1)
                best_ov = ov[np.arange(f.n_regions), best]
            else:
                best = np.zeros(f.n_regions, dtype=int)
                best_ov = np.zeros(f.n_regions)
            for r in np.flatnonzero(best_ov >= POSITIVE_IOU):
                ann = e.annotations[best[r]]
                if not 0 <= ann.class_id < num_classes:
                    raise InvalidInputError(f"class {ann.class_id} outside [0, {num_classes})")
                pos[ann.class_id].append(f.features[r])
                if best_ov[r] >= REFINER_IOU:
                    ref_x.append(f.features[r])
                    ref_p.append(f.boxes[r])
                    ref_g.append(ann.box.as_array())
            if e.negatives is None:
                neg_idx = np.flatnonzero(best_ov < NEGATIVE_IOU)
            else:
                neg_idx = np.asarray(e.negatives, dtype=int)
            if len(neg_idx):
                neg.append(f.features[neg_idx])
        if dim is None:
            raise InvalidInputError("labeled set has no regions")
        positives = [np.array(p).reshape(-1, dim) for p in pos]
        negatives = np.vstack(neg) if neg else np.zeros((0, dim))
        refiner = (
            np.array(ref_x).reshape(-1, dim),
            np.array(ref_p).reshape(-1, 4),
            np.array(ref_g).reshape(-1, 4),
        )
        return positives, negatives, refiner


class UnlabeledStream:
    """Ordered frames that can be iterated exactly once."""

    def __init__(self, frames: Sequence[Frame]):
        self._frames = list(frames)
        self._consumed = False

    def __len__(self) -> int:
        return len(self._frames)

    @property
    def consumed(self) -> bool:
        return self._consumed

    def __iter__(self) -> Iterator[Frame]:
        if self._consumed:
            raise ContractViolation("unlabeled stream already consumed; only one pass is allowed")
        self._consumed = True
        return iter(self._frames)


class LabelOracle(Protocol):
    def answer(self, frame_id: int) -> List[Annotation]: ...


class OracleError(RuntimeError):
    pass


class GroundTruthOracle:
    """Answers queries from known annotations (the simulated human teacher)."""

    def __init__(self, frames: Iterable[Frame] = (), answers: Optional[Dict[int, Sequence[Annotation]]] = None):
        self._answers: Dict[int, Tuple[Annotation, ...]] = {f.frame_id: tuple(f.hidden_gt) for f in frames}
        if answers:
            self._answers.update({k: tuple(v) for k, v in answers.items()})
        self.n_queries = 0

    @classmethod
    def from_file(cls, path) -> "GroundTruthOracle":
        from .frames import read_frames

        _, frames = read_frames(path)
        return cls(frames)

    def answer(self, frame_id: int) -> List[Annotation]:
        if frame_id not in self._answers:
            raise OracleError(f"no annotation available for frame {frame_id}")
        self.n_queries += 1
        return list(self._answers[frame_id])


@dataclass(frozen=True)
class TrainConfig:
    minibootstrap: MinibootstrapParams = MinibootstrapParams()
    confidence_threshold: float = 0.5
    nms_threshold: float = 0.3
    confidence_gain: float = 4.0


@dataclass(frozen=True)
class ScoringConfig:
    n_stitches: int = 3
    seed: int = 0


def train_on(labeled: LabeledSet, num_classes: int, params: TrainConfig) -> DetectorModel:
    positives, negatives, refiner = labeled.training_data(num_classes)
    return minibootstrap_train(
        positives,
        negatives,
        params.minibootstrap,
        refiner_data=refiner,
        confidence_threshold=params.confidence_threshold,
        nms_threshold=params.nms_threshold,
        confidence_gain=params.confidence_gain,
    )


def supervised_phase(labeled: LabeledSet, num_classes: int, params: TrainConfig = TrainConfig()) -> DetectorModel:
    """Train the seed model on the labeled set."""
    if len(labeled) == 0:
        raise InvalidInputError("labeled set is empty")
    t0 = time.perf_counter()
    model = train_on(labeled, num_classes, params)
    model.train_info["train_seconds"] = time.perf_counter() - t0
    return model


@dataclass
class PhaseReport:
    policy: str
    budget: int
    ssl: Optional[str]
    n_frames: int = 0
    queries_used: int = 0
    ss_selected: int = 0
    ss_fraction: float = 0.0
    pseudo_positives: int = 0
    pseudo_true_positives: int = 0
    pseudo_negatives: int = 0
    false_negative_regions: int = 0
    pseudo_gt_objects: int = 0
    civ_placement_fallbacks: int = 0
    labeled_before: int = 0
    labeled_after: int = 0
    aborted: Optional[str] = None
    timings: Dict[str, float] = field(default_factory=dict)
    decisions: List[Dict] = field(default_factory=list)

    @property
    def pseudo_precision(self) -> Optional[float]:
        return self.pseudo_true_positives / self.pseudo_positives if self.pseudo_positives else None

    @property
    def pseudo_recall(self) -> Optional[float]:
        return self.pseudo_true_positives / self.pseudo_gt_objects if self.pseudo_gt_objects else None

    def to_dict(self) -> Dict:
        d = asdict(self)
        d.pop("decisions")
        d["pseudo_precision"] = self.pseudo_precision
        d["pseudo_recall"] = self.pseudo_recall
        return d

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    def write_decisions_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["frame_id", "position", "score", "decision", "policy"])
            writer.writeheader()
            writer.writerows(self.decisions)


class PhaseAborted(RuntimeError):
    def __init__(self, message: str, report: PhaseReport):
        super().__init__(message)
        self.report = report


# frame_id -> (detections, score); valid only for one (seed model, scoring config)
ScoreCache = Dict[int, Tuple[list, ConsistencyScore]]


def _pseudo_diagnostics(report: PhaseReport, frame: Frame, label: PseudoLabel) -> None:
    gt = frame.hidden_gt
    report.pseudo_positives += len(label.positive_annotations)
    report.pseudo_negatives += len(label.negative_regions)
    report.pseudo_gt_objects += len(gt)
    if not gt:
        return
    gt_boxes = np.array([a.box.as_tuple() for a in gt])
    used = set()
    for ann in label.positive_annotations:
        ov = iou_matrix(ann.box.as_array()[None], gt_boxes)[0]
        for j in np.argsort(-ov, kind="stable"):
            if ov[j] < POSITIVE_IOU:
                break
            if j not in used and gt[j].class_id == ann.class_id:
                used.add(j)
                report.pseudo_true_positives += 1
                break
    if label.negative_regions:
        ov = iou_matrix(frame.boxes[list(label.negative_regions)], gt_boxes)
        report.false_negative_regions += int(np.sum(ov.max(axis=1) >= POSITIVE_IOU))


def weakly_supervised_phase(
    seed_model: DetectorModel,
    stream: UnlabeledStream,
    oracle: LabelOracle,
    labeled: LabeledSet,
    al_cfg: Optional[AlPolicyConfig] = None,
    ss_cfg: Optional[SslConfig] = None,
    train_params: TrainConfig = TrainConfig(),
    scoring: ScoringConfig = ScoringConfig(),
    seed: int = 0,
    cache: Optional[ScoreCache] = None,
) -> Tuple[DetectorModel, PhaseReport]:
    """One pass over ``stream``: AL queries, pseudo-labels, then a single retrain.

    Stream policies decide frame by frame. Pool policies score the whole
    stream first and select once at the end. A frame that is queried is never
    also pseudo-labeled. ``labeled`` itself is left untouched; the augmented
    copy is available as ``report.augmented``.
    """
    al_cfg = al_cfg or AlPolicyConfig(variant="fixed_window", budget=0)
    policy_name = al_cfg.variant if al_cfg.budget > 0 else "none"
    report = PhaseReport(policy_name, al_cfg.budget, ss_cfg.variant if ss_cfg else None)
    report.labeled_before = len(labeled)
    augmented = labeled.copy()
    scorer = CivScorer(seed_model, labeled.frames, scoring.n_stitches, scoring.seed)
    n_u = len(stream)
    selector = None if al_cfg.is_pool else StreamSelector(al_cfg, n_u, seed=[seed, 1])
    t_score = 0.0

    def score_frame(frame: Frame):
        nonlocal t_score
        if cache is not None and frame.frame_id in cache:
            return cache[frame.frame_id]
        t0 = time.perf_counter()
        dets = detect(seed_model, frame)
        result = (dets, scorer.score(frame, dets))
        t_score += time.perf_counter() - t0
        if cache is not None:
            cache[frame.frame_id] = result
        return result

    def handle(frame: Frame, dets, score: ConsistencyScore, query: bool) -> None:
        decision = "skip"
        report.civ_placement_fallbacks += score.placement_fallbacks
        if query:
            try:
                answers = oracle.answer(frame.frame_id)
            except Exception as exc:
                report.aborted = f"oracle failed on frame {frame.frame_id}: {exc}"
                report.n_frames = len(report.decisions)
                raise PhaseAborted(report.aborted, report) from exc
            augmented.add(LabeledFrame(frame, tuple(answers), None, "oracle"))
            report.queries_used += 1
            decision = "query"
        elif ss_cfg is not None:
            label = ss_decide(frame, dets, score, ss_cfg)
            if label is not None:
                augmented.add(LabeledFrame(frame, label.positive_annotations, label.negative_regions, label.provenance))
                report.ss_selected += 1
                _pseudo_diagnostics(report, frame, label)
                decision = "pseudo"
        report.decisions.append(
            {
                "frame_id": frame.frame_id,
                "position": frame.position,
                "score": f"{score.value:.6f}",
                "decision": decision,
                "policy": policy_name if decision != "pseudo" else ss_cfg.variant,
            }
        )

    t0 = time.perf_counter()
    if al_cfg.is_pool:
        seen = []
        for frame in stream:
            dets, score = score_frame(frame)
            seen.append((frame, dets, score))
        k = min(al_cfg.budget, len(seen))
        sel_rng = np.random.default_rng([seed, 2])
        if al_cfg.variant == "uniform_pool":
            chosen = pool_select_uniform([s for _, _, s in seen], al_cfg.tau, k, sel_rng)
        else:
            cand = [i for i, (_, _, s) in enumerate(seen) if is_uncertain(s, al_cfg.tau)]
            feats = np.array([seen[i][0].image_feature() for i in cand])
            picked = pool_select_kmeans(feats, min(k, len(cand)), al_cfg.kmeans_max_iters, sel_rng) if cand else set()
            chosen = {cand[i] for i in picked}
        for i, (frame, dets, score) in enumerate(seen):
            handle(frame, dets, score, i in chosen)
    else:
        for index, frame in enumerate(stream):
            dets, score = score_frame(frame)
            query = al_cfg.budget > 0 and selector.decide(score, index) is Decision.QUERY
            handle(frame, dets, score, query)
    report.timings["select"] = time.perf_counter() - t0 - t_score
    report.timings["score"] = t_score
    report.n_frames = len(report.decisions)
    report.ss_fraction = ss_fraction(report.ss_selected, max(report.n_frames, 1))
    if report.queries_used > al_cfg.budget:
        raise AssertionError(f"budget violated: {report.queries_used} > {al_cfg.budget}")

    t0 = time.perf_counter()
    model = train_on(augmented, seed_model.num_classes, train_params)
    report.timings["retrain"] = time.perf_counter() - t0
    report.labeled_after = len(augmented)
    report.augmented = augmented
    return model, report


@dataclass(frozen=True)
class EvalResult:
    per_class: Dict[int, float]
    mean_ap: float


def evaluate(model: DetectorModel, test: LabeledSet, iou_thresh: float = 0.5) -> EvalResult:
    """VOC 2007 mAP of ``model`` on a labeled test set."""
    dets = [d for f in test.frames for d in detect(model, f)]
    per_class = per_class_ap(dets, test.annotations(), iou_thresh)
    return EvalResult(per_class, map_score(per_class.values()) if per_class else 0.0)
