"""Synthetic detection worlds with controllable domain shift and redundancy.

Region features are Gaussian. Each class has a mean in feature space, every
object instance draws its own appearance around that mean, and background
proposals come from a small mixture of clutter modes.

In the target domain each class has ``shift_modes`` sub-appearances, each a
displacement of length ``shift_magnitude`` along its own direction. Clutter
modes move the same way. Directions are kept orthogonal to the span of the
source means (``shift_off_support``), so a shifted object drifts away from
every known class instead of turning into another one. Each instance scales
its displacement by a factor drawn uniformly from ``[1 - spread, 1 + spread]``:
some target objects still look familiar and others do not.

The target stream is built from runs of ``run_length`` consecutive frames
that perturb one base scene, like a camera lingering on one view. With
``stream_drift`` the stream moves through the sub-appearances in order,
like an exploration session visiting one area after another. The target test
set mixes all of them.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError
from .frames import Frame
from .geometry import Annotation, BoundingBox, iou_matrix
from .pipeline import POSITIVE_IOU, LabeledSet, UnlabeledStream

_SPLIT_SOURCE, _SPLIT_STREAM, _SPLIT_TEST = 1, 2, 3


@dataclass(frozen=True)
class WorldConfig:
    num_classes: int = 5
    feature_dim: int = 16
    class_spread: float = 1.6          # std of class-mean coordinates
    noise_scale: float = 1.0           # per-dimension std of object appearance
    n_background_modes: int = 6
    background_spread: float = 1.6
    background_noise: float = 1.2
    shift_magnitude: float = 0.0
    shift_shared: float = 0.0          # fraction of shift variance along one common direction
    shift_spread: float = 1.0          # per-instance shift factor is uniform on [1 - spread, 1 + spread]
    shift_off_support: bool = True     # keep shift directions orthogonal to the source means
    shift_modes: int = 3               # distinct target sub-appearances per class
    stream_drift: bool = True          # stream visits the sub-appearances in order instead of mixed
    region_noise: float = 0.25         # proposal-level feature noise, times noise_scale
    box_signal: float = 1.0            # how strongly box misalignment shows in features
    scene_size: Tuple[float, float] = (640.0, 480.0)
    objects_per_frame: Tuple[int, int] = (1, 3)
    object_size: Tuple[float, float] = (60.0, 160.0)
    proposals_per_gt: int = 1
    background_proposals: int = 10
    run_length: int = 1                # redundancy of the target stream
    run_jitter: float = 0.15           # within-run appearance change, times noise_scale
    source_run_length: int = 1
    n_labeled: int = 500
    n_unlabeled: int = 1000
    n_test: int = 300
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 1 or self.feature_dim < 1:
            raise ConfigError("num_classes and feature_dim must be >= 1")
        if self.run_length < 1 or self.source_run_length < 1:
            raise ConfigError("run lengths must be >= 1")
        if self.shift_magnitude < 0:
            raise ConfigError("shift_magnitude must be >= 0")
        if not 0.0 <= self.shift_shared <= 1.0:
            raise ConfigError("shift_shared must be in [0, 1]")
        if self.shift_modes < 1:
            raise ConfigError("shift_modes must be >= 1")
        if not 0.0 <= self.shift_spread <= 1.0:
            raise ConfigError("shift_spread must be in [0, 1]")
        lo, hi = self.objects_per_frame
        if not 0 <= lo <= hi:
            raise ConfigError(f"bad objects_per_frame {self.objects_per_frame}")
        smin, smax = self.object_size
        w, h = self.scene_size
        if not 0 < smin <= smax or smax >= min(w, h):
            raise ConfigError(f"object_size {self.object_size} does not fit scene {self.scene_size}")
        if hi * smax * smax > 0.5 * w * h:
            raise ConfigError("too many objects for the scene size; placement is infeasible")
        if min(self.n_labeled, self.n_unlabeled, self.n_test) < 0:
            raise ConfigError("set sizes must be >= 0")

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "WorldConfig":
        data = dict(data)
        for key in ("scene_size", "objects_per_frame", "object_size"):
            if key in data:
                data[key] = tuple(data[key])
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown world config fields: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class DomainParams:
    class_means: np.ndarray        # (C, d) source-domain means
    background_means: np.ndarray   # (B, d)
    class_shift: np.ndarray        # (C, S, d) displacement of each class sub-appearance in this domain
    background_shift: np.ndarray   # (B, d)
    shift_spread: float = 0.0

    def shift_factors(self, n: int, rng: np.random.Generator) -> np.ndarray:
        s = self.shift_spread
        return rng.uniform(1.0 - s, 1.0 + s, size=n)


@dataclass
class World:
    config: WorldConfig
    source: LabeledSet
    target_frames: List[Frame]
    target_test: LabeledSet
    source_domain: DomainParams
    target_domain: DomainParams
    box_basis: np.ndarray

    def stream(self) -> UnlabeledStream:
        """A fresh single-pass cursor over the target stream."""
        return UnlabeledStream(self.target_frames)

    def __iter__(self) -> Iterator:
        return iter((self.source, self.stream(), self.target_test))


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _off_support_projector(points: np.ndarray) -> np.ndarray:
    """Projector onto the complement of the span of ``points``.

    Shifting along these directions moves samples away from every source mean
    at once instead of onto another class; if the span fills the space the
    identity is returned.
    """
    d = points.shape[1]
    if len(points) >= d:
        return np.eye(d)
    q, _ = np.linalg.qr(points.T)
    return np.eye(d) - q @ q.T


def _domain_params(cfg: WorldConfig) -> Tuple[DomainParams, DomainParams, np.ndarray]:
    rng = np.random.default_rng([cfg.seed, 0])
    d, C = cfg.feature_dim, cfg.num_classes
    min_sep = 4.0 * cfg.noise_scale
    for _ in range(1000):
        means = rng.normal(0.0, cfg.class_spread, size=(C, d))
        if C < 2:
            break
        dists = np.linalg.norm(means[:, None] - means[None], axis=2)[np.triu_indices(C, 1)]
        if dists.min() > min_sep:
            break
    else:
        raise ConfigError("could not place class means with the required separation; raise class_spread")
    bg = rng.normal(0.0, cfg.background_spread, size=(cfg.n_background_modes, d))
    proj = _off_support_projector(np.vstack([means, bg])) if cfg.shift_off_support else np.eye(d)
    common = _unit(rng.normal(size=d) @ proj)
    a, b = np.sqrt(cfg.shift_shared), np.sqrt(1.0 - cfg.shift_shared)
    class_dirs = _unit(a * common + b * _unit(rng.normal(size=(C, cfg.shift_modes, d)) @ proj))
    bg_dirs = _unit(a * common + b * _unit(rng.normal(size=(cfg.n_background_modes, d)) @ proj))
    basis = rng.normal(size=(4, d)) / np.sqrt(d)
    src = DomainParams(means, bg, np.zeros_like(class_dirs), np.zeros_like(bg))
    tgt = DomainParams(
        means, bg, cfg.shift_magnitude * class_dirs, cfg.shift_magnitude * bg_dirs, cfg.shift_spread
    )
    return src, tgt, basis


def _place_objects(cfg: WorldConfig, n: int, rng: np.random.Generator) -> np.ndarray:
    W, H = cfg.scene_size
    smin, smax = cfg.object_size
    boxes: List[np.ndarray] = []
    for _ in range(n):
        for _ in range(200):
            w, h = rng.uniform(smin, smax, size=2)
            x0, y0 = rng.uniform(0, W - w), rng.uniform(0, H - h)
            box = np.array([x0, y0, x0 + w, y0 + h])
            if not boxes or iou_matrix(box[None], np.array(boxes)).max() == 0.0:
                boxes.append(box)
                break
        else:
            raise ConfigError("object placement failed; reduce objects_per_frame or object_size")
    return np.array(boxes).reshape(-1, 4)


def _jitter_box(gt: np.ndarray, rng: np.random.Generator, scene, min_iou: float = 0.55) -> np.ndarray:
    W, H = scene
    w, h = gt[2] - gt[0], gt[3] - gt[1]
    for _ in range(100):
        dx, dy = rng.normal(0, 0.1, size=2) * (w, h)
        sw, sh = np.exp(rng.normal(0, 0.1, size=2))
        cx, cy = (gt[0] + gt[2]) / 2 + dx, (gt[1] + gt[3]) / 2 + dy
        box = np.array([cx - sw * w / 2, cy - sh * h / 2, cx + sw * w / 2, cy + sh * h / 2])
        box = np.clip(box, [0, 0, 0, 0], [W, H, W, H])
        if box[2] - box[0] > 1 and box[3] - box[1] > 1 and iou_matrix(box[None], gt[None])[0, 0] >= min_iou:
            return box
    return gt.copy()


def _background_boxes(cfg: WorldConfig, gt_boxes: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    W, H = cfg.scene_size
    smin, smax = cfg.object_size
    out = []
    for _ in range(cfg.background_proposals):
        for _ in range(50):
            w, h = rng.uniform(0.5 * smin, 1.2 * smax, size=2)
            x0, y0 = rng.uniform(0, W - w), rng.uniform(0, H - h)
            box = np.array([x0, y0, x0 + w, y0 + h])
            if len(gt_boxes) == 0 or iou_matrix(box[None], gt_boxes).max() < 0.3:
                out.append(box)
                break
    return np.array(out).reshape(-1, 4)


@dataclass
class _Scene:
    classes: np.ndarray
    gt_boxes: np.ndarray
    appearance: np.ndarray     # (n_obj, d) instance features
    bg_boxes: np.ndarray
    bg_modes: np.ndarray
    bg_appearance: np.ndarray  # (n_bg, d)


class _Generator:
    def __init__(self, cfg: WorldConfig, box_basis: np.ndarray):
        self.cfg = cfg
        self.basis = box_basis

    def base_scene(self, domain: DomainParams, rng: np.random.Generator, phase: Optional[float] = None) -> _Scene:
        """``phase`` in [0, 1) pins every object to sub-appearance ``floor(phase * S)``."""
        cfg = self.cfg
        lo, hi = cfg.objects_per_frame
        n_obj = int(rng.integers(lo, hi + 1))
        classes = rng.integers(0, cfg.num_classes, size=n_obj)
        gt = _place_objects(cfg, n_obj, rng)
        n_sub = domain.class_shift.shape[1]
        sub = rng.integers(0, n_sub, size=n_obj)
        if phase is not None:
            sub[:] = min(int(phase * n_sub), n_sub - 1)
        appearance = (
            domain.class_means[classes]
            + domain.shift_factors(n_obj, rng)[:, None] * domain.class_shift[classes, sub]
            + cfg.noise_scale * rng.normal(size=(n_obj, cfg.feature_dim))
        )
        bg_boxes = _background_boxes(cfg, gt, rng)
        n_bg = len(bg_boxes)
        modes = rng.integers(0, len(domain.background_means), size=n_bg)
        bg_app = (
            domain.background_means[modes]
            + domain.shift_factors(n_bg, rng)[:, None] * domain.background_shift[modes]
            + cfg.background_noise * rng.normal(size=(n_bg, cfg.feature_dim))
        )
        return _Scene(classes, gt, appearance, bg_boxes, modes, bg_app)

    def perturb(self, scene: _Scene, rng: np.random.Generator) -> _Scene:
        """Next frame of a run: objects drift a few pixels, appearance changes slightly."""
        cfg = self.cfg
        W, H = cfg.scene_size
        j = cfg.run_jitter * cfg.noise_scale
        shift = rng.normal(0, 3.0, size=scene.gt_boxes.shape[:1] + (2,))
        gt = scene.gt_boxes + np.hstack([shift, shift])
        gt = np.clip(gt, [0, 0, 0, 0], [W, H, W, H])
        ok = (gt[:, 2] - gt[:, 0] > 1) & (gt[:, 3] - gt[:, 1] > 1)
        gt = np.where(ok[:, None], gt, scene.gt_boxes)
        return _Scene(
            scene.classes,
            gt,
            scene.appearance + j * rng.normal(size=scene.appearance.shape),
            scene.bg_boxes,
            scene.bg_modes,
            scene.bg_appearance + j * rng.normal(size=scene.bg_appearance.shape),
        )

    def render(self, scene: _Scene, frame_id: int, position: int, rng: np.random.Generator) -> Frame:
        cfg = self.cfg
        boxes, feats = [], []
        rn = cfg.region_noise * cfg.noise_scale
        for k in range(len(scene.gt_boxes)):
            gt = scene.gt_boxes[k]
            for _ in range(cfg.proposals_per_gt):
                prop = _jitter_box(gt, rng, cfg.scene_size)
                delta = _deltas(prop, gt)
                feats.append(scene.appearance[k] + rn * rng.normal(size=cfg.feature_dim) + cfg.box_signal * delta @ self.basis)
                boxes.append(prop)
        for k in range(len(scene.bg_boxes)):
            boxes.append(scene.bg_boxes[k])
            feats.append(scene.bg_appearance[k] + rn * rng.normal(size=cfg.feature_dim))
        gt_ann = tuple(
            Annotation(BoundingBox.from_array(b), int(c), frame_id) for b, c in zip(scene.gt_boxes, scene.classes)
        )
        boxes = np.array(boxes).reshape(-1, 4)
        feats = np.array(feats).reshape(-1, cfg.feature_dim)
        # shuffle so region order carries no label information
        order = rng.permutation(len(boxes))
        return Frame(frame_id, position, boxes[order], feats[order], gt_ann)


def _deltas(prop: np.ndarray, gt: np.ndarray) -> np.ndarray:
    pw, ph = prop[2] - prop[0], prop[3] - prop[1]
    gw, gh = gt[2] - gt[0], gt[3] - gt[1]
    return np.array([
        ((gt[0] + gt[2]) - (prop[0] + prop[2])) / (2 * pw),
        ((gt[1] + gt[3]) - (prop[1] + prop[3])) / (2 * ph),
        np.log(gw / pw),
        np.log(gh / ph),
    ])


def _make_split(gen: _Generator, domain: DomainParams, n: int, run_length: int, split: int,
                first_id: int, seed: int, drift: bool = False) -> List[Frame]:
    frames: List[Frame] = []
    n_runs = -(-n // run_length)
    for run in range(n_runs):
        rng = np.random.default_rng([seed, split, run])
        scene = gen.base_scene(domain, rng, run / n_runs if drift else None)
        for step in range(run_length):
            pos = run * run_length + step
            if pos >= n:
                break
            if step:
                scene = gen.perturb(scene, rng)
            frames.append(gen.render(scene, first_id + pos, pos, rng))
    return frames


def generate_world(cfg: WorldConfig) -> World:
    """Source (labeled), target stream (unlabeled) and target test sets.

    Frame ids are disjoint across the three sets; everything is a pure
    function of ``cfg`` (including ``cfg.seed``).
    """
    src, tgt, basis = _domain_params(cfg)
    gen = _Generator(cfg, basis)
    source = _make_split(gen, src, cfg.n_labeled, cfg.source_run_length, _SPLIT_SOURCE, 0, cfg.seed)
    stream = _make_split(gen, tgt, cfg.n_unlabeled, cfg.run_length, _SPLIT_STREAM, cfg.n_labeled, cfg.seed,
                         cfg.stream_drift)
    test = _make_split(gen, tgt, cfg.n_test, 1, _SPLIT_TEST, cfg.n_labeled + cfg.n_unlabeled, cfg.seed)
    return World(cfg, LabeledSet.from_frames(source), stream, LabeledSet.from_frames(test), src, tgt, basis)


def class_centroids(frames: Sequence[Frame], num_classes: int) -> Dict[int, np.ndarray]:
    """Mean feature of the proposals matching each class's ground truth."""
    sums: Dict[int, np.ndarray] = {}
    counts: Dict[int, int] = {}
    for f in frames:
        if not f.hidden_gt or f.n_regions == 0:
            continue
        ov = iou_matrix(f.boxes, f.gt_boxes())
        best = ov.argmax(axis=1)
        for r in np.flatnonzero(ov.max(axis=1) >= POSITIVE_IOU):
            c = f.hidden_gt[best[r]].class_id
            sums[c] = sums.get(c, 0) + f.features[r]
            counts[c] = counts.get(c, 0) + 1
    return {c: sums[c] / counts[c] for c in sums if c < num_classes}


def shift_report(source, target, num_classes: Optional[int] = None) -> float:
    """Mean over shared classes of the distance between per-domain class centroids."""
    src_frames = source.frames if isinstance(source, LabeledSet) else list(source)
    tgt_frames = target.frames if isinstance(target, LabeledSet) else list(target)
    if not src_frames or not tgt_frames:
        raise ConfigError("shift_report needs two nonempty sets")
    n = num_classes or 1 + max(a.class_id for f in src_frames + tgt_frames for a in f.hidden_gt)
    a, b = class_centroids(src_frames, n), class_centroids(tgt_frames, n)
    shared = sorted(set(a) & set(b))
    if not shared:
        raise ConfigError("no class present in both sets")
    return float(np.mean([np.linalg.norm(a[c] - b[c]) for c in shared]))


def subsample(labeled: LabeledSet, n: int, seed: int = 0) -> LabeledSet:
    """Seeded subset of ``n`` labeled frames, kept in original order."""
    entries = list(labeled)
    if n >= len(entries):
        return labeled.copy()
    idx = np.sort(np.random.default_rng(seed).choice(len(entries), size=n, replace=False))
    return LabeledSet(entries[i] for i in idx)
