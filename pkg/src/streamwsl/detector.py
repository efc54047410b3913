"""Region classification and box refinement on fixed region features.

Each target class gets a binary Nystrom kernel ridge-regression classifier
(Gaussian kernel, +/-1 targets) trained with Minibootstrap hard-negative
mining. A ridge regressor maps region features to box deltas.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import linalg

from .errors import InvalidInputError, TrainingError
from .frames import Frame, RegionFeature
from .geometry import BoundingBox, Detection, nms

logger = logging.getLogger(__name__)

MODEL_FORMAT = "streamwsl-model"
MODEL_VERSION = 1

_JITTER_STEPS = 7  # diag *= 1 + 10**i * 1e-10 for i in 0..6
_CHUNK = 512
_EIG_RTOL = 1e-15  # relative eigenvalue floor for the Nystrom feature map


def sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances, computed row-wise from explicit differences.

    The difference form keeps every row independent of the batch it is
    computed in, so scoring a region alone or inside a frame gives the same bits.
    """
    X = np.atleast_2d(X)
    out = np.empty((len(X), len(C)))
    for start in range(0, len(X), _CHUNK):
        diff = X[start:start + _CHUNK, None, :] - C[None, :, :]
        out[start:start + _CHUNK] = np.einsum("ijk,ijk->ij", diff, diff)
    return out


def gaussian_kernel(X: np.ndarray, C: np.ndarray, sigma: float) -> np.ndarray:
    return np.exp(-sq_dists(X, C) / (2.0 * sigma * sigma))


def median_heuristic(X: np.ndarray, rng: np.random.Generator, n_sub: int = 256) -> float:
    """Median pairwise distance over a random subsample of at most ``n_sub`` rows."""
    X = np.asarray(X, dtype=float)
    if len(X) > n_sub:
        X = X[rng.choice(len(X), size=n_sub, replace=False)]
    d = np.sqrt(sq_dists(X, X)[np.triu_indices(len(X), k=1)])
    d = d[d > 0]
    return float(np.median(d)) if d.size else 1.0


def _spd_solve(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    diag = np.diag(A).copy()
    for i in range(_JITTER_STEPS):
        A_j = A.copy()
        A_j[np.diag_indices_from(A_j)] = diag * (1.0 + 10.0 ** i * 1e-10)
        try:
            factor = linalg.cho_factor(A_j, lower=True, check_finite=False)
        except linalg.LinAlgError:
            continue
        return linalg.cho_solve(factor, b, check_finite=False)
    raise TrainingError("system is not positive definite after maximum jitter")


@dataclass(frozen=True)
class ClassClassifier:
    centers: np.ndarray
    coefficients: np.ndarray
    kernel_sigma: float
    lam: float

    def score(self, X: np.ndarray) -> np.ndarray:
        return gaussian_kernel(np.asarray(X, dtype=float), self.centers, self.kernel_sigma) @ self.coefficients


def _as_matrix(items, dim: Optional[int] = None) -> np.ndarray:
    if isinstance(items, np.ndarray):
        return items.reshape(-1, items.shape[-1]) if items.size else items.reshape(0, dim or items.shape[-1])
    items = list(items)
    if not items:
        return np.zeros((0, dim or 0))
    if isinstance(items[0], RegionFeature):
        return np.stack([np.asarray(r.vector, dtype=float) for r in items])
    return np.asarray(items, dtype=float)


def nystrom_fit(X, y, M: int, sigma: float, lam: float, rng_seed=0) -> ClassClassifier:
    """Nystrom kernel ridge regression with ``M`` uniformly sampled centers.

    The minimizer of ``|Knm a - y|^2 + lam * n * a^T Kmm a`` solves
    ``(Knm^T Knm + lam * n * Kmm) alpha = Knm^T y``. Forming that matrix squares
    the condition number of a smooth kernel, so the problem is solved as plain
    ridge regression on Nystrom features ``Knm U S^-1/2`` (``Kmm = U S U^T``),
    restricted to eigenvalues above ``_EIG_RTOL`` times the largest. Dropped
    directions have near-zero RKHS norm and do not change the scores.
    """
    X = _as_matrix(X)
    y = np.asarray(y, dtype=float).ravel()
    n = len(X)
    if n == 0 or n != len(y):
        raise InvalidInputError(f"nystrom_fit: {n} points vs {len(y)} labels")
    if not 1 <= M <= n:
        raise InvalidInputError(f"nystrom_fit: need 1 <= M <= n, got M={M}, n={n}")
    if sigma <= 0 or lam <= 0:
        raise InvalidInputError("nystrom_fit: sigma and lambda must be positive")
    if not np.all(np.isfinite(X)) or not np.all(np.isfinite(y)):
        raise TrainingError("non-finite Nystrom training data")
    rng = np.random.default_rng(rng_seed)
    centers = X[np.sort(rng.choice(n, size=M, replace=False))]
    Knm = gaussian_kernel(X, centers, sigma)
    Kmm = gaussian_kernel(centers, centers, sigma)
    evals, evecs = linalg.eigh(Kmm, check_finite=False)
    keep = evals > _EIG_RTOL * evals[-1]
    W = evecs[:, keep] / np.sqrt(evals[keep])
    Phi = Knm @ W
    A = Phi.T @ Phi
    A[np.diag_indices_from(A)] += lam * n
    alpha = W @ _spd_solve(A, Phi.T @ y)
    if not np.all(np.isfinite(alpha)):
        raise TrainingError("non-finite Nystrom coefficients")
    return ClassClassifier(centers, alpha, float(sigma), float(lam))


# -- box refinement ---------------------------------------------------------

def box_deltas(proposals: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """R-CNN parametrisation: center offsets scaled by size, log size ratios."""
    p = np.asarray(proposals, dtype=float).reshape(-1, 4)
    g = np.asarray(targets, dtype=float).reshape(-1, 4)
    pw, ph = p[:, 2] - p[:, 0], p[:, 3] - p[:, 1]
    gw, gh = g[:, 2] - g[:, 0], g[:, 3] - g[:, 1]
    return np.stack([
        ((g[:, 0] + g[:, 2]) - (p[:, 0] + p[:, 2])) / (2 * pw),
        ((g[:, 1] + g[:, 3]) - (p[:, 1] + p[:, 3])) / (2 * ph),
        np.log(gw / pw),
        np.log(gh / ph),
    ], axis=1)


def apply_deltas(proposals: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    p = np.asarray(proposals, dtype=float).reshape(-1, 4)
    d = np.asarray(deltas, dtype=float).reshape(-1, 4)
    pw, ph = p[:, 2] - p[:, 0], p[:, 3] - p[:, 1]
    cx = (p[:, 0] + p[:, 2]) / 2 + d[:, 0] * pw
    cy = (p[:, 1] + p[:, 3]) / 2 + d[:, 1] * ph
    # log-size deltas clipped so a bad refiner cannot blow boxes up
    w = pw * np.exp(np.clip(d[:, 2], -4.0, 4.0))
    h = ph * np.exp(np.clip(d[:, 3], -4.0, 4.0))
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)


@dataclass(frozen=True)
class BoxRefiner:
    weights: np.ndarray  # (d + 1, 4); last row is the bias
    ridge: float

    def predict_deltas(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        return X @ self.weights[:-1] + self.weights[-1]

    def refine(self, boxes: np.ndarray, X: np.ndarray) -> np.ndarray:
        if len(boxes) == 0:
            return np.zeros((0, 4))
        return apply_deltas(boxes, self.predict_deltas(X))

    @classmethod
    def identity(cls, dim: int, ridge: float = 1.0) -> "BoxRefiner":
        return cls(np.zeros((dim + 1, 4)), ridge)


def fit_refiner_arrays(X: np.ndarray, proposals: np.ndarray, targets: np.ndarray, ridge: float) -> BoxRefiner:
    X = np.asarray(X, dtype=float)
    if len(X) == 0:
        raise InvalidInputError("refiner needs at least one training pair")
    T = box_deltas(proposals, targets)
    Xa = np.hstack([X, np.ones((len(X), 1))])
    A = Xa.T @ Xa + ridge * np.eye(Xa.shape[1])
    W = _spd_solve(A, Xa.T @ T)
    return BoxRefiner(W, float(ridge))


def rls_fit_refiner(positives: Sequence[Tuple[RegionFeature, BoundingBox]], ridge: float) -> BoxRefiner:
    """Closed-form ridge regression from region features to box deltas."""
    if not positives:
        raise InvalidInputError("refiner needs at least one training pair")
    X = np.stack([r.vector for r, _ in positives])
    P = np.array([r.source_box.as_tuple() for r, _ in positives])
    G = np.array([g.as_tuple() for _, g in positives])
    return fit_refiner_arrays(X, P, G, ridge)


# -- detector model ---------------------------------------------------------

@dataclass(frozen=True)
class MinibootstrapParams:
    n_batches: int = 4
    batch_size: int = 500
    hard_negative_score_min: float = 0.0
    max_negatives_kept: int = 2000
    n_centers: int = 200
    lam: float = 1e-3
    sigma: Optional[float] = None  # None -> median heuristic
    refiner_ridge: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_batches < 1 or self.batch_size < 1:
            raise InvalidInputError("n_batches and batch_size must be >= 1")
        if self.max_negatives_kept < self.batch_size:
            raise InvalidInputError("max_negatives_kept must be >= batch_size")
        if self.n_centers < 1 or self.lam <= 0:
            raise InvalidInputError("n_centers >= 1 and lam > 0 required")


@dataclass(frozen=True)
class DetectorModel:
    classifiers: Tuple[ClassClassifier, ...]
    refiner: BoxRefiner
    feature_dim: int
    confidence_threshold: float = 0.5
    nms_threshold: float = 0.3
    confidence_gain: float = 4.0
    train_info: Dict = field(default_factory=dict, compare=False)

    @property
    def num_classes(self) -> int:
        return len(self.classifiers)

    def margins(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.feature_dim:
            raise InvalidInputError(f"expected features of dim {self.feature_dim}, got shape {X.shape}")
        return np.stack([clf.score(X) for clf in self.classifiers], axis=1)

    def confidence(self, margin):
        z = np.clip(self.confidence_gain * np.asarray(margin, dtype=float), -30.0, 30.0)
        return 1.0 / (1.0 + np.exp(-z))

    def with_thresholds(self, confidence_threshold=None, nms_threshold=None) -> "DetectorModel":
        return DetectorModel(
            self.classifiers,
            self.refiner,
            self.feature_dim,
            self.confidence_threshold if confidence_threshold is None else confidence_threshold,
            self.nms_threshold if nms_threshold is None else nms_threshold,
            self.confidence_gain,
            self.train_info,
        )


def minibootstrap_train(
    positives: Sequence,
    negatives_pool,
    params: MinibootstrapParams = MinibootstrapParams(),
    refiner_data: Optional[Tuple[np.ndarray, np.ndarray, np.ndarray]] = None,
    confidence_threshold: float = 0.5,
    nms_threshold: float = 0.3,
    confidence_gain: float = 4.0,
) -> DetectorModel:
    """Train one classifier per class with batched hard-negative mining.

    ``positives[c]`` holds the region features of class ``c``. The negative
    pool of class ``c`` is the shared background pool plus the positives of
    every other class. ``refiner_data`` is ``(features, proposal_boxes,
    gt_boxes)`` for the box refiner; without it the refiner is the identity.
    """
    pos = [_as_matrix(p) for p in positives]
    if not pos:
        raise InvalidInputError("no classes to train")
    dim = max(p.shape[1] for p in pos if p.size) if any(p.size for p in pos) else 0
    for c, p in enumerate(pos):
        if len(p) == 0:
            raise TrainingError(f"class {c} has no positive examples")
    neg = _as_matrix(negatives_pool, dim)
    if len(neg) == 0:
        raise InvalidInputError("negatives pool is empty")
    if neg.shape[1] != dim or any(p.shape[1] != dim for p in pos):
        raise InvalidInputError("feature dimension mismatch across training regions")

    sigma = params.sigma
    if sigma is None:
        sigma = median_heuristic(np.vstack(pos + [neg]), np.random.default_rng([params.seed, 7919]))

    classifiers = []
    info = {"sigma": sigma, "retained": [], "train_size": []}
    for c, p in enumerate(pos):
        others = [q for j, q in enumerate(pos) if j != c]
        pool = np.vstack([neg] + others)
        rng = np.random.default_rng([params.seed, c])
        perm = rng.permutation(len(pool))
        chunks = [
            perm[i * params.batch_size:(i + 1) * params.batch_size]
            for i in range(params.n_batches)
            if i * params.batch_size < len(perm)
        ]

        def fit(neg_idx, it):
            X = np.vstack([p, pool[neg_idx]])
            y = np.concatenate([np.ones(len(p)), -np.ones(len(neg_idx))])
            return nystrom_fit(X, y, min(params.n_centers, len(X)), sigma, params.lam, [params.seed, c, it])

        clf = fit(chunks[0], 0)
        retained = np.zeros(0, dtype=int)
        for it, chunk in enumerate(chunks, start=1):
            chunk_scores = clf.score(pool[chunk])
            hard = chunk[chunk_scores >= params.hard_negative_score_min]
            candidates = np.concatenate([retained, hard])
            if len(candidates) > params.max_negatives_kept:
                cand_scores = clf.score(pool[candidates])
                # stable sort: equal scores keep earlier (already retained) entries
                order = np.argsort(-cand_scores, kind="stable")[: params.max_negatives_kept]
                candidates = candidates[np.sort(order)]
            retained = candidates
            clf = fit(retained, it)
        classifiers.append(clf)
        info["retained"].append(int(len(retained)))
        info["train_size"].append(int(len(p) + len(retained)))

    if refiner_data is not None and len(refiner_data[0]):
        refiner = fit_refiner_arrays(*refiner_data, ridge=params.refiner_ridge)
    else:
        refiner = BoxRefiner.identity(dim, params.refiner_ridge)

    return DetectorModel(
        tuple(classifiers), refiner, dim, confidence_threshold, nms_threshold, confidence_gain, info
    )


def detect(model: DetectorModel, frame: Frame) -> List[Detection]:
    """Classify every region, keep confident ones, refine boxes, then NMS."""
    if frame.n_regions == 0:
        return []
    if frame.feature_dim != model.feature_dim:
        raise InvalidInputError(f"frame {frame.frame_id}: feature dim {frame.feature_dim} != {model.feature_dim}")
    return detect_from_margins(model, frame, model.margins(frame.features))


def detect_from_margins(model: DetectorModel, frame: Frame, margins: np.ndarray) -> List[Detection]:
    """``detect`` with the per-region class margins already computed."""
    if frame.n_regions == 0:
        return []
    cls = np.argmax(margins, axis=1)
    best = margins[np.arange(len(cls)), cls]
    conf = model.confidence(best)
    keep = np.flatnonzero(conf >= model.confidence_threshold)
    if keep.size == 0:
        return []
    boxes = model.refiner.refine(frame.boxes[keep], frame.features[keep])
    dets = [
        Detection(BoundingBox.from_array(b), int(cls[i]), float(conf[i]), frame.frame_id, int(i))
        for b, i in zip(boxes, keep)
    ]
    return nms(dets, model.nms_threshold)


# -- serialization ----------------------------------------------------------

def model_to_dict(model: DetectorModel) -> Dict:
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "feature_dim": model.feature_dim,
        "confidence_threshold": model.confidence_threshold,
        "nms_threshold": model.nms_threshold,
        "confidence_gain": model.confidence_gain,
        "classifiers": [
            {
                "sigma": clf.kernel_sigma,
                "lambda": clf.lam,
                "centers": clf.centers.tolist(),
                "coefficients": clf.coefficients.tolist(),
            }
            for clf in model.classifiers
        ],
        "refiner": {"weights": model.refiner.weights.tolist(), "ridge": model.refiner.ridge},
    }


def model_from_dict(data: Dict) -> DetectorModel:
    if data.get("format") != MODEL_FORMAT:
        raise InvalidInputError("not a streamwsl model file")
    if int(data.get("version", -1)) > MODEL_VERSION:
        raise InvalidInputError(f"unsupported model version {data.get('version')}")
    classifiers = tuple(
        ClassClassifier(
            np.asarray(c["centers"], dtype=float),
            np.asarray(c["coefficients"], dtype=float),
            float(c["sigma"]),
            float(c["lambda"]),
        )
        for c in data["classifiers"]
    )
    refiner = BoxRefiner(np.asarray(data["refiner"]["weights"], dtype=float), float(data["refiner"]["ridge"]))
    return DetectorModel(
        classifiers,
        refiner,
        int(data["feature_dim"]),
        float(data["confidence_threshold"]),
        float(data["nms_threshold"]),
        float(data["confidence_gain"]),
    )


def save_model(model: DetectorModel, path: Union[str, Path]) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model)))


def load_model(path: Union[str, Path]) -> DetectorModel:
    return model_from_dict(json.loads(Path(path).read_text()))
