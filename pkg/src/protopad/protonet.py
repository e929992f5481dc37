"""Prototype computation, distance-softmax classification, and the episode loss.

Classes are represented by the mean of their embedded support vectors. A
query is scored by a softmax over negated distances to those prototypes and
trained with the mean negative log probability of the true class. Training
gradients are exact and flow through both the query embeddings and, via the
prototype means, the support embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .data import Sample
from .errors import DataError

# Posteriors below this are treated as constant by the loss (and its gradient),
# so a collapsed posterior cannot produce an infinite loss.
LOG_PROB_CLAMP = 1e-12


class DistanceMetric(str, Enum):
    SQUARED_EUCLIDEAN = "squared_euclidean"
    EUCLIDEAN = "euclidean"
    COSINE = "cosine"


@dataclass(frozen=True)
class Episode:
    """A support set and query set drawn for one few-shot task.

    ``users_overlap`` records that the sampler could not make support and
    query user-disjoint and fell back to sample-id disjointness.
    """

    support: tuple[Sample, ...]
    query: tuple[Sample, ...]
    class_set: tuple[int, ...]
    users_overlap: bool = False

    def __post_init__(self) -> None:
        support_classes = {int(s.label) for s in self.support}
        missing = [c for c in self.class_set if c not in support_classes]
        if missing:
            raise DataError(f"support set has no samples for classes {missing}")
        support_ids = {s.sample_id for s in self.support}
        clash = support_ids.intersection(s.sample_id for s in self.query)
        if clash:
            raise DataError(f"support and query share sample ids: {sorted(clash)[:3]}")


@dataclass(frozen=True)
class PrototypeSet:
    """One mean embedding per class, ordered like class_set."""

    class_set: tuple[int, ...]
    vectors: np.ndarray

    def __post_init__(self) -> None:
        vectors = np.asarray(self.vectors, dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[0] != len(self.class_set):
            raise DataError(
                f"expected one prototype per class ({len(self.class_set)}), got shape {vectors.shape}"
            )
        if not np.all(np.isfinite(vectors)):
            raise DataError("prototypes contain non-finite values")
        object.__setattr__(self, "vectors", vectors)

    @property
    def dimension(self) -> int:
        return self.vectors.shape[1]


@dataclass(frozen=True)
class ClassPosterior:
    """Per-class probabilities over class_set; sums to one."""

    class_set: tuple[int, ...]
    probabilities: np.ndarray

    def __post_init__(self) -> None:
        probs = np.asarray(self.probabilities, dtype=np.float64)
        if probs.shape != (len(self.class_set),):
            raise DataError("one probability per class required")
        if np.any(probs < 0.0) or np.any(probs > 1.0) or abs(probs.sum() - 1.0) > 1e-9:
            raise DataError(f"probabilities must be a distribution, got {probs!r}")
        object.__setattr__(self, "probabilities", probs)

    def prob_of(self, cls: int) -> float:
        return float(self.probabilities[self.class_set.index(cls)])


def compute_prototypes(
    embedded_support: Sequence[tuple[int, np.ndarray]],
    class_set: Sequence[int],
) -> PrototypeSet:
    """Arithmetic mean of each class's embedded support vectors.

    Raises:
        DataError: a class in class_set has no support vectors.
    """
    class_set = tuple(int(c) for c in class_set)
    by_class: dict[int, list[np.ndarray]] = {c: [] for c in class_set}
    for cls, vec in embedded_support:
        if int(cls) not in by_class:
            raise DataError(f"support class {cls} is not in class_set {class_set}")
        by_class[int(cls)].append(np.asarray(vec, dtype=np.float64))
    protos = []
    for c in class_set:
        if not by_class[c]:
            raise DataError(f"class {c} has no support vectors")
        protos.append(np.mean(np.stack(by_class[c]), axis=0))
    return PrototypeSet(class_set, np.stack(protos))


def distance(a: np.ndarray, b: np.ndarray, metric: DistanceMetric) -> float:
    """Distance between two vectors under the chosen metric.

    squared_euclidean: sum((a-b)^2); euclidean: its square root;
    cosine: 1 - a.b / (|a||b|), which requires both vectors nonzero.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DataError(f"vectors have shapes {a.shape} and {b.shape}")
    metric = DistanceMetric(metric)
    if metric is DistanceMetric.COSINE:
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na == 0.0 or nb == 0.0:
            raise DataError("cosine distance is undefined for a zero vector")
        return float(1.0 - float(a @ b) / (na * nb))
    sq = float(np.sum((a - b) ** 2))
    return sq if metric is DistanceMetric.SQUARED_EUCLIDEAN else float(np.sqrt(sq))


def _distances_to_prototypes(
    q: np.ndarray, protos: PrototypeSet, metric: DistanceMetric
) -> np.ndarray:
    return np.array([distance(q, p, metric) for p in protos.vectors])


def _softmax_neg(distances: np.ndarray) -> np.ndarray:
    # Max-subtraction on the -distance logits keeps huge distances stable.
    logits = -np.asarray(distances, dtype=np.float64)
    logits = logits - logits.max()
    e = np.exp(logits)
    return e / e.sum()


def classify_query(
    q_embedding: np.ndarray,
    protos: PrototypeSet,
    metric: DistanceMetric = DistanceMetric.SQUARED_EUCLIDEAN,
) -> tuple[ClassPosterior, int]:
    """Posterior over classes plus the predicted class for one query.

    posterior_k = exp(-d_k) / sum_j exp(-d_j); the prediction is the class of
    the nearest prototype, ties broken toward the earlier class_set entry.
    """
    q = np.asarray(q_embedding, dtype=np.float64)
    if q.shape != (protos.dimension,):
        raise DataError(f"query has shape {q.shape}, prototypes have dimension {protos.dimension}")
    d = _distances_to_prototypes(q, protos, DistanceMetric(metric))
    probs = _softmax_neg(d)
    predicted = protos.class_set[int(np.argmin(d))]
    return ClassPosterior(protos.class_set, probs), predicted


def episode_loss(posteriors: Sequence[ClassPosterior], true_classes: Sequence[int]) -> float:
    """Mean negative log probability of the true class over the query set."""
    if len(posteriors) != len(true_classes) or not posteriors:
        raise DataError("posteriors and true_classes must be same nonempty length")
    total = 0.0
    for post, cls in zip(posteriors, true_classes):
        total -= np.log(max(post.prob_of(int(cls)), LOG_PROB_CLAMP))
    return float(total / len(posteriors))


@dataclass(frozen=True)
class EpisodeGradients:
    """Loss value and exact gradients with respect to every embedding."""

    loss: float
    grad_support: np.ndarray
    grad_query: np.ndarray
    query_posteriors: np.ndarray = field(repr=False)


def episode_loss_gradient(
    support_embeddings: np.ndarray,
    support_classes: Sequence[int],
    query_embeddings: np.ndarray,
    query_classes: Sequence[int],
    class_set: Sequence[int],
    metric: DistanceMetric = DistanceMetric.SQUARED_EUCLIDEAN,
) -> EpisodeGradients:
    """Episode loss and its gradient w.r.t. support and query embeddings.

    Only the squared-Euclidean training metric is supported: its gradient is
    smooth everywhere and nearest-prototype predictions match the Euclidean
    ones. Support gradients flow through the class means; queries whose true
    posterior fell below the clamp contribute a constant loss and no gradient.
    """
    if DistanceMetric(metric) is not DistanceMetric.SQUARED_EUCLIDEAN:
        raise DataError(f"training gradients require squared_euclidean, got {metric}")
    class_set = tuple(int(c) for c in class_set)
    S = np.asarray(support_embeddings, dtype=np.float64)
    Q = np.asarray(query_embeddings, dtype=np.float64)
    if S.ndim != 2 or Q.ndim != 2 or S.shape[1] != Q.shape[1]:
        raise DataError("support and query embeddings must be 2-D with equal dimension")
    s_cls = [int(c) for c in support_classes]
    q_cls = [int(c) for c in query_classes]
    if len(s_cls) != S.shape[0] or len(q_cls) != Q.shape[0]:
        raise DataError("one class label per embedding required")

    protos = compute_prototypes(list(zip(s_cls, S)), class_set)
    P = protos.vectors
    counts = np.array([s_cls.count(c) for c in class_set], dtype=np.float64)
    col = {c: k for k, c in enumerate(class_set)}

    # D[i, k] = |q_i - p_k|^2
    diff = Q[:, None, :] - P[None, :, :]
    D = np.sum(diff * diff, axis=2)
    logits = -D
    logits -= logits.max(axis=1, keepdims=True)
    expl = np.exp(logits)
    probs = expl / expl.sum(axis=1, keepdims=True)

    nq = Q.shape[0]
    onehot = np.zeros_like(probs)
    for i, c in enumerate(q_cls):
        if c not in col:
            raise DataError(f"query class {c} is not in class_set {class_set}")
        onehot[i, col[c]] = 1.0

    p_true = (probs * onehot).sum(axis=1)
    loss = float(np.mean(-np.log(np.maximum(p_true, LOG_PROB_CLAMP))))

    # dL/dlogits, averaged over the query set; clamped queries are constant.
    A = (probs - onehot) / nq
    A[p_true < LOG_PROB_CLAMP] = 0.0

    # logits_ik = -|q_i - p_k|^2, so dL/dq_i = 2 (A @ P)_i (rows of A sum to 0)
    # and dL/dp_k = 2 (A^T Q)_k - 2 p_k * colsum(A)_k, split evenly over the
    # class's support vectors.
    grad_query = 2.0 * (A @ P)
    colsum = A.sum(axis=0)
    grad_proto = 2.0 * (A.T @ Q) - 2.0 * P * colsum[:, None]
    grad_support = np.stack([grad_proto[col[c]] / counts[col[c]] for c in s_cls])
    return EpisodeGradients(loss, grad_support, grad_query, probs)
