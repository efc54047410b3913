"""Active-learning query policies: pool-based and stream-based.

Temporal windows are applied as forward suppression: once frame ``t`` is
queried, frames ``t+1 .. t+delta`` are not eligible. On a single pass this is
the same exclusion as a symmetric ``[t - delta, t + delta]`` window, because
frames before ``t`` have already been decided.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Set, Union

import numpy as np

from .errors import ConfigError, ContractViolation, InvalidInputError
from .scoring import ConsistencyScore, UncertaintyScore

POOL_VARIANTS = ("uniform_pool", "kmeans_pool")
STREAM_VARIANTS = ("coin_flip", "fixed_window", "adaptive_window")
VARIANTS = POOL_VARIANTS + STREAM_VARIANTS


class Decision(enum.Enum):
    QUERY = "query"
    SKIP = "skip"


@dataclass(frozen=True)
class AlPolicyConfig:
    variant: str = "adaptive_window"
    budget: int = 0
    tau: float = 0.6
    delta_fixed: int = 6
    alpha: float = 0.5
    coin_prob: float = 0.5
    kmeans_max_iters: int = 100

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown AL variant {self.variant!r}; expected one of {VARIANTS}")
        if self.budget < 0:
            raise ConfigError("budget must be >= 0")
        if self.delta_fixed < 0:
            raise ConfigError("delta_fixed must be >= 0")
        if not 0.0 < self.coin_prob <= 1.0:
            raise ConfigError("coin_prob must be in (0, 1]")
        if self.variant == "adaptive_window" and self.budget > 0 and not 0.0 < self.alpha < self.budget:
            raise ConfigError(f"alpha must be in (0, k={self.budget}), got {self.alpha}")

    @property
    def is_pool(self) -> bool:
        return self.variant in POOL_VARIANTS


@dataclass
class BudgetState:
    k_total: int
    n_unlabeled: int
    k_used: int = 0
    last_selected_index: Optional[int] = None
    last_index: Optional[int] = None

    @property
    def remaining(self) -> int:
        return self.k_total - self.k_used


def adaptive_window(n_unlabeled: int, k: int, alpha: float) -> int:
    """Window size ``n_U * alpha / k``, rounded half-up to whole frames."""
    if n_unlabeled < 1 or k < 1:
        raise InvalidInputError("adaptive_window needs n_U >= 1 and k >= 1")
    if not 0.0 < alpha < k:
        raise ConfigError(f"alpha must be in (0, {k}), got {alpha}")
    return max(0, int(math.floor(n_unlabeled * alpha / k + 0.5)))


def window_size(cfg: AlPolicyConfig, n_unlabeled: int) -> int:
    if cfg.variant == "fixed_window":
        return cfg.delta_fixed
    if cfg.variant == "adaptive_window":
        return adaptive_window(n_unlabeled, cfg.budget, cfg.alpha) if cfg.budget > 0 else 0
    return 0


def is_uncertain(score: Union[ConsistencyScore, UncertaintyScore, float], tau: float) -> bool:
    """Uncertainty scores are uncertain above ``tau``. Consistency scores and
    plain floats (read as confidences) are uncertain below it."""
    if isinstance(score, UncertaintyScore):
        return float(score) > tau
    if isinstance(score, ConsistencyScore):
        return score.value < tau
    return float(score) < tau


def stream_decide(
    score: Union[ConsistencyScore, float],
    index: int,
    state: BudgetState,
    cfg: AlPolicyConfig,
    rng: np.random.Generator,
) -> Decision:
    """Irrevocable query/skip decision for stream position ``index``.

    Mutates ``state``. The coin is only flipped for uncertain frames with
    budget left, so decisions never depend on anything after ``index``.
    """
    if cfg.is_pool:
        raise ConfigError(f"{cfg.variant} is a pool policy")
    if state.last_index is not None and index <= state.last_index:
        raise ContractViolation(f"stream index {index} after {state.last_index}")
    state.last_index = index
    if state.k_used >= state.k_total or not is_uncertain(score, cfg.tau):
        return Decision.SKIP
    if cfg.variant == "coin_flip":
        if rng.random() >= cfg.coin_prob:
            return Decision.SKIP
    else:
        delta = window_size(cfg, state.n_unlabeled)
        if state.last_selected_index is not None and index - state.last_selected_index <= delta:
            return Decision.SKIP
    state.k_used += 1
    state.last_selected_index = index
    return Decision.QUERY


class StreamSelector:
    """Bundles the mutable state of one stream-based policy run."""

    def __init__(self, cfg: AlPolicyConfig, n_unlabeled: int, seed=0):
        self.cfg = cfg
        self.state = BudgetState(cfg.budget, n_unlabeled)
        self.rng = np.random.default_rng(seed)

    def decide(self, score, index: int) -> Decision:
        return stream_decide(score, index, self.state, self.cfg, self.rng)


def pool_select_uniform(scores: Sequence, tau: float, k: int, rng: np.random.Generator) -> Set[int]:
    """Uniform sample (without replacement) of up to ``k`` uncertain indices."""
    if k < 0:
        raise InvalidInputError("k must be >= 0")
    candidates = [i for i, s in enumerate(scores) if is_uncertain(s, tau)]
    if k == 0 or not candidates:
        return set()
    chosen = rng.choice(len(candidates), size=min(k, len(candidates)), replace=False)
    return {candidates[i] for i in chosen}


def _kmeans_pp_init(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(X)
    first = int(rng.integers(n))
    chosen = [first]
    d2 = np.sum((X - X[first]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            # all remaining points coincide with a center: take the lowest unused index
            nxt = next(i for i in range(n) if i not in chosen)
        else:
            nxt = int(rng.choice(n, p=d2 / total))
        chosen.append(nxt)
        d2 = np.minimum(d2, np.sum((X - X[nxt]) ** 2, axis=1))
    return X[chosen].copy()


def kmeans(X: np.ndarray, k: int, max_iters: int, rng: np.random.Generator, tol: float = 1e-6):
    """Lloyd's algorithm with k-means++ seeding. Returns ``(centroids, labels)``."""
    centroids = _kmeans_pp_init(X, k, rng)
    labels = np.zeros(len(X), dtype=int)
    for _ in range(max_iters):
        d2 = np.sum((X[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
        labels = np.argmin(d2, axis=1)
        new = centroids.copy()
        for j in range(k):
            members = X[labels == j]
            if len(members):
                new[j] = members.mean(axis=0)
        shift = np.max(np.linalg.norm(new - centroids, axis=1))
        centroids = new
        if shift < tol:
            break
    return centroids, labels


def pool_select_kmeans(features, k: int, max_iters: int = 100, rng: Optional[np.random.Generator] = None) -> Set[int]:
    """Cluster the candidates and return, per cluster, the candidate nearest its centroid.

    Candidates are never selected twice; distance ties go to the lowest index.
    """
    X = np.asarray(features, dtype=float)
    if X.ndim != 2:
        X = X.reshape(len(X), -1)
    if k > len(X):
        raise InvalidInputError(f"k={k} exceeds {len(X)} candidates")
    if k <= 0:
        return set()
    rng = rng if rng is not None else np.random.default_rng(0)
    centroids, _ = kmeans(X, k, max_iters, rng)
    selected: List[int] = []
    taken = np.zeros(len(X), dtype=bool)
    for c in centroids:
        d2 = np.sum((X - c) ** 2, axis=1)
        d2[taken] = np.inf
        idx = int(np.argmin(d2))  # argmin returns the first (lowest) index on ties
        taken[idx] = True
        selected.append(idx)
    return set(selected)
