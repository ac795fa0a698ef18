"""Lightweight calibrated binary classifier and the metrics that steer
annotation: balanced accuracy, average precision, the cross-validated model
quality score, and the cluster-based data diversity score.
"""

from __future__ import annotations

import hashlib
import threading
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit

POSITIVE = "positive"
NEGATIVE = "negative"


class SingleClassError(ValueError):
    """Training or evaluation requires both classes present."""


class InsufficientClassCountError(ValueError):
    """Per-class count is below what the fold layout requires."""


def label_to_int(value: object) -> int:
    if value in (1, True, POSITIVE):
        return 1
    if value in (0, False, NEGATIVE):
        return 0
    raise ValueError(f"bad label value: {value!r}")


# ---------------------------------------------------------------------------
# Labeled data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LabeledSet:
    """Training data: one row per clip, labels as 1 (positive) / 0 (negative)."""

    clip_ids: tuple[str, ...]
    X: np.ndarray  # (n, D)
    y: np.ndarray  # (n,) int8

    def __post_init__(self) -> None:
        if len(self.clip_ids) != self.X.shape[0] or self.X.shape[0] != self.y.shape[0]:
            raise ValueError("clip_ids, X, and y must have matching lengths")
        if len(set(self.clip_ids)) != len(self.clip_ids):
            raise ValueError("duplicate clip_id in labeled set")
        self.X.setflags(write=False)
        self.y.setflags(write=False)

    @classmethod
    def from_items(cls, items: Iterable[tuple[str, np.ndarray, object]]) -> "LabeledSet":
        ids, rows, labels = [], [], []
        for clip_id, emb, label in items:
            ids.append(clip_id)
            rows.append(np.asarray(emb, dtype=np.float64))
            labels.append(label_to_int(label))
        X = np.array(rows, dtype=np.float64) if rows else np.zeros((0, 0))
        return cls(tuple(ids), X, np.array(labels, dtype=np.int8))

    def __len__(self) -> int:
        return len(self.clip_ids)

    @property
    def pos_count(self) -> int:
        return int(self.y.sum())

    @property
    def neg_count(self) -> int:
        return len(self) - self.pos_count

    def subset(self, indices: Sequence[int]) -> "LabeledSet":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledSet(
            tuple(self.clip_ids[i] for i in idx),
            self.X[idx].copy(),
            self.y[idx].copy(),
        )

    def digest(self) -> str:
        """Content hash, invariant to row order."""
        order = np.argsort(np.array(self.clip_ids), kind="stable")
        h = hashlib.sha256()
        for i in order:
            h.update(self.clip_ids[i].encode())
            h.update(bytes([int(self.y[i])]))
            h.update(np.ascontiguousarray(self.X[i], dtype=np.float64).tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# Configs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    l2_strength: float = 1.0
    max_iterations: int = 500
    convergence_tol: float = 1e-8  # on gradient norm
    seed: int = 0
    balance_classes: bool = False  # re-weight loss by inverse class frequency

    def __post_init__(self) -> None:
        if self.l2_strength < 0:
            raise ValueError("l2_strength must be >= 0")


@dataclass(frozen=True)
class CVConfig:
    folds: int = 5
    percentile: float = 25.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.folds < 2:
            raise ValueError("folds must be >= 2")


@dataclass(frozen=True)
class DiversityConfig:
    k: int = 10
    s: int = 10
    kmeans_seed: int = 0
    kmeans_max_iters: int = 100

    def __post_init__(self) -> None:
        if self.k < 1 or self.s < 1:
            raise ValueError("k and s must be >= 1")


@dataclass(frozen=True)
class ClassifierSnapshot:
    """One trained linear model version; scores are sigmoid(weights . x + bias)."""

    weights: np.ndarray
    bias: float
    version: int
    train_digest: str
    trained_at_n: int
    quality_score: float | None = None  # 0..100
    diversity_score: float | None = None  # 0..100
    loss_trace: tuple[float, ...] = field(default=(), repr=False, compare=False)

    def __post_init__(self) -> None:
        self.weights.setflags(write=False)

    def with_scores(self, quality: float, diversity: float, version: int) -> "ClassifierSnapshot":
        return replace(
            self, quality_score=quality, diversity_score=diversity, version=version
        )


# ---------------------------------------------------------------------------
# Classifier
# ---------------------------------------------------------------------------

def loss_and_gradient(
    weights: np.ndarray,
    bias: float,
    X: np.ndarray,
    y: np.ndarray,
    l2_strength: float,
    sample_weights: np.ndarray | None = None,
) -> tuple[float, np.ndarray, float]:
    """Negative L2-penalized log-likelihood of the linear logit model and its
    exact gradient. The bias is not penalized."""
    z = X @ weights + bias
    # log(1 + exp(z)) - y*z, computed stably
    ce = np.logaddexp(0.0, z) - y * z
    residual = expit(z) - y
    if sample_weights is not None:
        ce = ce * sample_weights
        residual = residual * sample_weights
    loss = float(ce.sum() + 0.5 * l2_strength * weights @ weights)
    grad_w = X.T @ residual + l2_strength * weights
    grad_b = float(residual.sum())
    return loss, grad_w, grad_b


def train(data: LabeledSet, cfg: TrainConfig = TrainConfig()) -> ClassifierSnapshot:
    """Fit the regularized logistic model deterministically (zero init, L-BFGS).

    Requires at least one positive and one negative example. The returned
    snapshot carries version 0; the session assigns real versions.
    """
    if data.pos_count == 0 or data.neg_count == 0:
        raise SingleClassError(
            f"training needs both classes, got {data.pos_count} positive / "
            f"{data.neg_count} negative"
        )
    X = np.asarray(data.X, dtype=np.float64)
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite feature values in training data")
    y = data.y.astype(np.float64)
    n, dim = X.shape

    sample_weights = None
    if cfg.balance_classes:
        w_pos = n / (2.0 * data.pos_count)
        w_neg = n / (2.0 * data.neg_count)
        sample_weights = np.where(y == 1.0, w_pos, w_neg)

    def objective(theta: np.ndarray) -> tuple[float, np.ndarray]:
        loss, grad_w, grad_b = loss_and_gradient(
            theta[:dim], theta[dim], X, y, cfg.l2_strength, sample_weights
        )
        return loss, np.append(grad_w, grad_b)

    trace: list[float] = [objective(np.zeros(dim + 1))[0]]

    result = minimize(
        objective,
        np.zeros(dim + 1),
        jac=True,
        method="L-BFGS-B",
        callback=lambda theta: trace.append(objective(theta)[0]),
        options={
            "maxiter": cfg.max_iterations,
            "gtol": cfg.convergence_tol,
            "ftol": 1e-15,
            "maxfun": 10 * cfg.max_iterations,
        },
    )

    weights = result.x[:dim].copy()
    bias = float(result.x[dim])
    if not np.all(np.isfinite(weights)) or not np.isfinite(bias):
        raise ValueError("optimizer produced non-finite parameters")
    return ClassifierSnapshot(
        weights=weights,
        bias=bias,
        version=0,
        train_digest=data.digest(),
        trained_at_n=n,
        loss_trace=tuple(trace),
    )


def predict_scores(model: ClassifierSnapshot, corpus) -> np.ndarray:
    """Score every clip, aligned with corpus clip order; each score in [0, 1]."""
    if corpus.dimension != model.weights.shape[0]:
        raise ValueError(
            f"model dimension {model.weights.shape[0]} does not match corpus "
            f"dimension {corpus.dimension}"
        )
    z = corpus.embeddings.astype(np.float64) @ model.weights + model.bias
    return expit(z)


def score_clip(model: ClassifierSnapshot, embedding: np.ndarray) -> float:
    z = float(np.asarray(embedding, dtype=np.float64) @ model.weights + model.bias)
    return float(expit(z))


# ---------------------------------------------------------------------------
# Evaluation metrics
# ---------------------------------------------------------------------------

def balanced_accuracy(
    scores: Sequence[float], labels: Sequence[object], threshold: float = 0.5
) -> float:
    """(TPR + TNR) / 2 with prediction positive iff score >= threshold."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.array([label_to_int(v) for v in labels], dtype=np.int8)
    pos = int(y.sum())
    neg = len(y) - pos
    if pos == 0 or neg == 0:
        raise SingleClassError("balanced accuracy needs both classes present")
    pred = s >= threshold
    tpr = float(np.sum(pred & (y == 1))) / pos
    tnr = float(np.sum(~pred & (y == 0))) / neg
    return (tpr + tnr) / 2.0


def _ap_from_ranked_labels(ranked: np.ndarray) -> float:
    positives = int(ranked.sum())
    if positives == 0:
        raise ValueError("average precision needs at least one positive")
    hits = np.cumsum(ranked)
    ks = np.nonzero(ranked)[0] + 1
    return float(np.sum(hits[ks - 1] / ks) / positives)


def average_precision(
    scores: Sequence[float],
    labels: Sequence[object],
    ids: Sequence[str] | None = None,
) -> float:
    """Mean of precision@k over positive positions, ranking by descending
    score with ties broken by ascending id (row index when ids omitted)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.array([label_to_int(v) for v in labels], dtype=np.int8)
    if len(s) != len(y):
        raise ValueError("scores and labels must have matching lengths")
    if ids is None:
        tie_key = np.arange(len(s))
    else:
        id_arr = np.array(list(ids))
        tie_key = np.empty(len(id_arr), dtype=np.int64)
        tie_key[np.argsort(id_arr, kind="stable")] = np.arange(len(id_arr))
    order = np.lexsort((tie_key, -s))
    return _ap_from_ranked_labels(y[order])


def baseline_expected_ap(
    labels: Sequence[object], permutations: int = 1000, seed: int = 0
) -> float:
    """Monte Carlo estimate of AP under uniformly random ranking."""
    y = np.array([label_to_int(v) for v in labels], dtype=np.int8)
    if y.sum() == 0:
        raise ValueError("expected AP needs at least one positive")
    rng = np.random.default_rng(seed)
    total = 0.0
    for _ in range(permutations):
        total += _ap_from_ranked_labels(y[rng.permutation(len(y))])
    return total / permutations


# ---------------------------------------------------------------------------
# Model quality score
# ---------------------------------------------------------------------------

def stratified_folds(
    y: np.ndarray, folds: int, seed: int
) -> list[np.ndarray]:
    """Seeded stratified split: shuffled positives and negatives are dealt
    round-robin so every fold holds at least one of each class."""
    rng = np.random.default_rng(seed)
    pos_idx = rng.permutation(np.nonzero(y == 1)[0])
    neg_idx = rng.permutation(np.nonzero(y == 0)[0])
    return [
        np.sort(np.concatenate([pos_idx[i::folds], neg_idx[i::folds]]))
        for i in range(folds)
    ]


def quality_from_fold_scores(fold_scores: Sequence[float], percentile: float = 25.0) -> float:
    """Aggregate per-fold balanced accuracies: 100 x the given percentile,
    linear interpolation between order statistics."""
    return float(np.percentile(np.asarray(fold_scores, dtype=np.float64), percentile)) * 100.0


def model_quality_score(
    data: LabeledSet, tcfg: TrainConfig = TrainConfig(), cv: CVConfig = CVConfig()
) -> float:
    """100 x the configured percentile (default 25th, linear interpolation)
    of per-fold balanced accuracies under stratified K-fold CV."""
    k = cv.folds
    if data.pos_count < k or data.neg_count < k:
        raise InsufficientClassCountError(
            f"need at least {k} positives and {k} negatives for {k}-fold CV, "
            f"got {data.pos_count} / {data.neg_count}"
        )
    fold_indices = stratified_folds(data.y, k, cv.seed)
    all_idx = np.arange(len(data))
    bas = []
    for held_out in fold_indices:
        train_idx = np.setdiff1d(all_idx, held_out)
        model = train(data.subset(train_idx), tcfg)
        held = data.subset(held_out)
        scores = expit(held.X @ model.weights + model.bias)
        bas.append(balanced_accuracy(scores, held.y))
    return quality_from_fold_scores(bas, cv.percentile)


# ---------------------------------------------------------------------------
# K-means clustering and the data diversity score
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class KMeansResult:
    assignments: np.ndarray  # (n,) int cluster per row
    centers: np.ndarray  # (k, D)
    inertia_trace: tuple[float, ...]
    n_iter: int


def _kmeans_pp_init(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centers = np.empty((k, X.shape[1]), dtype=np.float64)
    centers[0] = X[rng.integers(n)]
    dist2 = np.sum((X - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        total = dist2.sum()
        if total <= 0.0:
            centers[j] = X[rng.integers(n)]
            continue
        centers[j] = X[rng.choice(n, p=dist2 / total)]
        dist2 = np.minimum(dist2, np.sum((X - centers[j]) ** 2, axis=1))
    return centers


def lloyd_kmeans(
    X: np.ndarray, k: int, seed: int = 0, max_iters: int = 100
) -> KMeansResult:
    """Seeded k-means++ initialization followed by Lloyd iterations with
    squared Euclidean distance, run until assignments stop changing."""
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if n < k:
        raise ValueError(f"need at least k={k} points, got {n}")
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp_init(X, k, rng)

    assignments = np.full(n, -1, dtype=np.int64)
    inertia_trace: list[float] = []
    sq_norms = np.sum(X * X, axis=1)
    for iteration in range(max_iters):
        # ||x - c||^2 = ||x||^2 - 2 x.c + ||c||^2; argmin ties go to the lowest cluster
        dists = (
            sq_norms[:, None]
            - 2.0 * (X @ centers.T)
            + np.sum(centers * centers, axis=1)[None, :]
        )
        new_assignments = np.argmin(dists, axis=1)

        for empty in np.setdiff1d(np.arange(k), np.unique(new_assignments)):
            point_d = dists[np.arange(n), new_assignments]
            farthest = int(np.argmax(point_d))
            new_assignments[farthest] = empty
            dists[farthest] = 0.0

        inertia_trace.append(
            float(np.sum((X - centers[new_assignments]) ** 2))
        )
        if np.array_equal(new_assignments, assignments):
            break
        assignments = new_assignments
        for j in range(k):
            members = X[assignments == j]
            if len(members):
                centers[j] = members.mean(axis=0)
    return KMeansResult(
        assignments=assignments,
        centers=centers,
        inertia_trace=tuple(inertia_trace),
        n_iter=len(inertia_trace),
    )


_cluster_cache: dict[tuple, dict[str, int]] = {}
_cluster_cache_lock = threading.Lock()


def cluster_corpus(corpus, cfg: DiversityConfig = DiversityConfig()) -> dict[str, int]:
    """Cluster assignment per clip_id; cached per (corpus digest, config)."""
    key = (corpus.ingest_manifest_digest, cfg.k, cfg.kmeans_seed, cfg.kmeans_max_iters)
    with _cluster_cache_lock:
        cached = _cluster_cache.get(key)
    if cached is not None:
        return cached
    if len(corpus) < cfg.k:
        raise ValueError(f"corpus of {len(corpus)} clips is smaller than k={cfg.k}")
    result = lloyd_kmeans(
        corpus.embeddings, cfg.k, seed=cfg.kmeans_seed, max_iters=cfg.kmeans_max_iters
    )
    assignments = {
        clip.clip_id: int(result.assignments[i]) for i, clip in enumerate(corpus.clips)
    }
    with _cluster_cache_lock:
        _cluster_cache[key] = assignments
    return assignments


def data_diversity_score(
    annotations: LabeledSet,
    assignments: Mapping[str, int],
    cfg: DiversityConfig = DiversityConfig(),
) -> float:
    """Capped, normalized spread of annotations across clusters, in [0, 1].

    Per cluster, positive and negative counts are capped at s, summed over
    clusters and both polarities, then divided by 2*k*s.
    """
    pos_counts = [0] * cfg.k
    neg_counts = [0] * cfg.k
    for clip_id, label in zip(annotations.clip_ids, annotations.y):
        if clip_id not in assignments:
            raise KeyError(f"no cluster assignment for annotated clip {clip_id}")
        cluster = assignments[clip_id]
        if label == 1:
            pos_counts[cluster] += 1
        else:
            neg_counts[cluster] += 1
    total = sum(min(c, cfg.s) for c in pos_counts) + sum(
        min(c, cfg.s) for c in neg_counts
    )
    return total / (2 * cfg.k * cfg.s)
