"""Prototypical mechanics: class centroids, similarity scores, nearest-prototype
prediction, and the episodic softmax loss with its exact gradients.

Similarity is negative squared Euclidean distance, so "closest" and "argmax"
agree. The loss for one query is the negative log softmax of its similarity
row; episode loss is the mean over query shots, which keeps the learning rate
comparable across shot counts and class counts. Gradients flow both to the
query representations and, through the centroid mean, to every support
representation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class PrototypeSet:
    centroids: np.ndarray  # (n_classes, d)
    counts: tuple[int, ...]  # support shots per class

    @property
    def n_classes(self) -> int:
        return self.centroids.shape[0]


@dataclass(frozen=True)
class EpisodeLossResult:
    loss: float
    predictions: np.ndarray  # (n_query,) class indices
    query_grads: np.ndarray  # (n_query, d)
    support_grads: list[np.ndarray]  # per class, (k_c, d)


def compute_prototypes(support_reps: Sequence[np.ndarray]) -> PrototypeSet:
    """Centroid per class: the arithmetic mean of its support representations."""
    if not support_reps:
        raise ValueError("no support classes")
    centroids = []
    counts = []
    for i, reps in enumerate(support_reps):
        arr = np.atleast_2d(np.asarray(reps, dtype=np.float64))
        if arr.shape[0] == 0:
            raise ValueError(f"class {i} has an empty support list")
        centroids.append(arr.mean(axis=0))
        counts.append(arr.shape[0])
    return PrototypeSet(centroids=np.stack(centroids), counts=tuple(counts))


def similarity(query_rep: np.ndarray, proto: np.ndarray) -> float:
    """Negative squared Euclidean distance; 0 iff the vectors are equal."""
    diff = np.asarray(query_rep, dtype=np.float64) - np.asarray(proto, dtype=np.float64)
    return float(-np.dot(diff, diff))


def similarity_matrix(query_reps: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """(n_query, n_classes) similarities, same arithmetic as `similarity`."""
    diff = query_reps[:, None, :] - centroids[None, :, :]
    return -np.einsum("qcd,qcd->qc", diff, diff)

def predict(query_rep: np.ndarray, protos: PrototypeSet) -> int:
    """Class of the nearest prototype; ties go to the lowest class index."""
    sims = similarity_matrix(np.atleast_2d(np.asarray(query_rep, dtype=np.float64)),
                             protos.centroids)
    return int(np.argmax(sims[0]))


def predict_batch(query_reps: np.ndarray, protos: PrototypeSet) -> np.ndarray:
    sims = similarity_matrix(np.asarray(query_reps, dtype=np.float64), protos.centroids)
    return np.argmax(sims, axis=1)


def episode_loss(
    query_reps: np.ndarray,
    query_labels: Sequence[int],
    support_reps: Sequence[np.ndarray],
) -> EpisodeLossResult:
    """Episodic loss: mean over queries of -log softmax(similarities)[label].

    The softmax is computed with max subtraction; raw-embedding distances can
    be on the order of 1e4. Support gradients are the centroid gradients
    divided by each class's shot count (chain rule through the mean).
    """
    q = np.atleast_2d(np.asarray(query_reps, dtype=np.float64))
    labels = np.asarray(query_labels, dtype=np.intp)
    if labels.shape[0] != q.shape[0]:
        raise ValueError("one label per query representation required")
    if not np.all(np.isfinite(q)):
        raise ValueError("non-finite query representation")
    protos = compute_prototypes(support_reps)
    if not np.all(np.isfinite(protos.centroids)):
        raise ValueError("non-finite support representation")
    n_classes = protos.n_classes
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError("query label references a missing class")

    diff = q[:, None, :] - protos.centroids[None, :, :]  # (nq, C, d)
    sims = -np.einsum("qcd,qcd->qc", diff, diff)
    shifted = sims - sims.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    n_query = q.shape[0]
    loss = float(-log_p[np.arange(n_query), labels].mean())
    predictions = np.argmax(sims, axis=1)

    # d(loss)/d(sims) = (softmax - onehot) / n_query
    grad_sims = np.exp(log_p)
    grad_sims[np.arange(n_query), labels] -= 1.0
    grad_sims /= n_query
    # sims = -||q - c||^2: d/dq = -2 diff, d/dc = +2 diff
    query_grads = np.einsum("qc,qcd->qd", grad_sims, -2.0 * diff)
    centroid_grads = np.einsum("qc,qcd->cd", grad_sims, 2.0 * diff)
    support_grads = []
    for c, count in enumerate(protos.counts):
        per_shot = centroid_grads[c] / count
        support_grads.append(np.tile(per_shot, (count, 1)))
    return EpisodeLossResult(
        loss=loss,
        predictions=predictions,
        query_grads=query_grads,
        support_grads=support_grads,
    )
