"""1-D k-means over per-neuron coefficient scores and cluster-level ablation."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .attribution import cache_concept_pass
from .model import AblationMask, ModelWeights, PassCounter, activate

log = logging.getLogger(__name__)

MODES = ("forward", "literal")


def coefficient_scores(weights: ModelWeights, concept, mode: str = "forward", add_positions: bool = False,
                       counter: Optional[PassCounter] = None) -> np.ndarray:
    """Coefficient score of every neuron, flattened layer-major, length ``L * N``.

    ``forward`` uses the activations recorded on the concept vector's own
    pass. ``literal`` applies every layer's subkeys to the concept vector
    directly: ``act(fc1_k . c)`` with no layer norm and no bias.
    """
    c = np.asarray(getattr(concept, "values", concept), dtype=np.float64)
    if mode == "forward":
        # the targets are irrelevant for the coefficients; any valid id will do
        trace = cache_concept_pass(weights, c, [0], add_positions, counter)
        return trace.coeffs.astype(np.float64).reshape(-1)
    if mode == "literal":
        x = c.astype(weights.dtype)
        rows = [activate(layer.w_fc1 @ x, weights.config.activation) for layer in weights.layers]
        return np.concatenate(rows).astype(np.float64)
    raise ValueError(f"unknown mode {mode!r}")


@dataclass(frozen=True)
class ClusterAssignment:
    k: int
    labels: np.ndarray
    centroids: np.ndarray
    seed: int
    mode: str = "forward"
    inertia: float = 0.0

    def members(self, cluster: int) -> np.ndarray:
        return np.flatnonzero(self.labels == cluster)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.k)

    def to_json(self) -> dict:
        return {"k": self.k, "seed": self.seed, "mode": self.mode,
                "labels": [int(x) for x in self.labels],
                "centroids": [float(x) for x in self.centroids]}

    @classmethod
    def from_json(cls, obj: dict) -> "ClusterAssignment":
        return cls(int(obj["k"]), np.array(obj["labels"], dtype=np.int64),
                   np.array(obj["centroids"], dtype=np.float64), int(obj["seed"]), obj.get("mode", "forward"))


def _assign(x, centroids):
    # nearest centroid in 1-D: sort centroids and cut at midpoints; ties go to the lower centroid
    order = np.argsort(centroids, kind="stable")
    sc = centroids[order]
    cuts = (sc[1:] + sc[:-1]) / 2
    return order[np.searchsorted(cuts, x, side="left")]


def _kmeanspp(x, k, rng):
    centroids = np.empty(k)
    centroids[0] = x[rng.integers(x.size)]
    d2 = (x - centroids[0]) ** 2
    for i in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, x.size - 1)
        else:
            idx = int(rng.integers(x.size))
        centroids[i] = x[idx]
        d2 = np.minimum(d2, (x - centroids[i]) ** 2)
    return centroids


def _lloyd(x, centroids, max_iter, tol):
    k = centroids.size
    labels = _assign(x, centroids)
    for _ in range(max_iter):
        sums = np.bincount(labels, weights=x, minlength=k)
        counts = np.bincount(labels, minlength=k)
        new = np.where(counts > 0, sums / np.maximum(counts, 1), centroids)
        shift = np.abs(new - centroids).max()
        centroids = new
        new_labels = _assign(x, centroids)
        stable = np.array_equal(new_labels, labels)
        labels = new_labels
        if stable or shift < tol:
            break
    counts = np.bincount(labels, minlength=k)
    sums = np.bincount(labels, weights=x, minlength=k)
    centroids = np.where(counts > 0, sums / np.maximum(counts, 1), centroids)
    inertia = float(((x - centroids[labels]) ** 2).sum())
    return labels, centroids, inertia


def kmeans_1d(scores, k: int, seed: int = 0, n_init: int = 10, max_iter: int = 100, tol: float = 1e-6,
              mode: str = "forward") -> ClusterAssignment:
    """Seeded k-means++ then Lloyd iterations; keeps the restart with the lowest WCSS."""
    x = np.asarray(scores, dtype=np.float64).reshape(-1)
    if not 2 <= k <= x.size:
        raise ValueError(f"k must be in [2, {x.size}], got {k}")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        labels, centroids, inertia = _lloyd(x, _kmeanspp(x, k, rng), max_iter, tol)
        if best is None or inertia < best[2]:
            best = (labels, centroids, inertia)
    labels, centroids, inertia = best
    return ClusterAssignment(k, labels.astype(np.int64), centroids, seed, mode, inertia)


@dataclass(frozen=True)
class ClusterRanking:
    order: tuple  # cluster ids, most concept-relevant first
    means: dict  # cluster id -> mean effect
    sizes: dict
    empty: tuple = ()

    @property
    def top(self) -> int:
        return self.order[0]

    def to_json(self) -> list:
        return [{"cluster": u, "mean_effect": self.means[u], "size": self.sizes[u]} for u in self.order]


def rank_clusters(assignment: ClusterAssignment, effects) -> ClusterRanking:
    """Order clusters by the mean effect score of their members (ties: lower id first)."""
    e = np.asarray(effects, dtype=np.float64).reshape(-1)
    if e.size != assignment.labels.size:
        raise ValueError(f"effects length {e.size} != {assignment.labels.size} neurons")
    means, sizes, empty = {}, {}, []
    for u in range(assignment.k):
        idx = assignment.members(u)
        if idx.size == 0:
            log.warning("cluster %d is empty; excluded from ranking", u)
            empty.append(u)
            continue
        means[u] = float(e[idx].mean())
        sizes[u] = int(idx.size)
    order = tuple(sorted(means, key=lambda u: (-means[u], u)))
    return ClusterRanking(order, means, sizes, tuple(empty))


def cluster_mask(assignment: ClusterAssignment, ranking: ClusterRanking, which: Union[str, int],
                 d_ffn: int) -> AblationMask:
    """Mask every member of the selected cluster.

    ``which`` is ``"top"``, ``"complement"`` (every neuron outside the top
    cluster), or an explicit cluster id.
    """
    if which == "top":
        idx = assignment.members(ranking.top)
    elif which == "complement":
        idx = np.flatnonzero(assignment.labels != ranking.top)
    else:
        try:
            u = int(which)
        except (TypeError, ValueError):
            raise ValueError(f"invalid cluster selector {which!r}") from None
        if not 0 <= u < assignment.k:
            raise ValueError(f"cluster id {u} outside [0, {assignment.k})")
        idx = assignment.members(u)
    return AblationMask.of((int(i // d_ffn), int(i % d_ffn)) for i in idx)
