"""Seeded Lloyd k-means and the two-level neuron/instance factorization."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .cnn import ActivationMatrix
from .dataset import mix_seed, rng_for
from .errors import ShapeMismatch, TooFewPoints


@dataclass
class KMeansModel:
    k: int
    centroids: np.ndarray  # (k, d)
    assignment: np.ndarray  # (M,)
    inertia: float
    inertia_history: list = field(default_factory=list)
    n_iter: int = 0


def squared_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """(M, k) squared Euclidean distances, computed by direct differences (no norm expansion)."""
    out = np.empty((len(points), len(centroids)))
    for j, c in enumerate(centroids):
        diff = points - c
        out[:, j] = np.einsum("ij,ij->i", diff, diff)
    return out


def nearest(points: np.ndarray, centroids: np.ndarray):
    d2 = squared_distances(points, centroids)
    labels = d2.argmin(axis=1)  # first minimum -> lowest cluster index on ties
    return labels, d2[np.arange(len(points)), labels]


def kmeans_plus_plus(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Greedy k-means++ seeding (2 + ln k candidate draws per centre)."""
    m = len(points)
    trials = 2 + int(math.log(k)) if k > 1 else 1
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[rng.integers(m)]
    closest = squared_distances(points, centers[:1])[:, 0]
    for c in range(1, k):
        total = closest.sum()
        if total <= 0:
            # every point coincides with a centre already; pick any unused position
            candidates = rng.integers(m, size=trials)
        else:
            cdf = np.cumsum(closest)
            candidates = np.searchsorted(cdf, rng.random(trials) * total, side="right")
            candidates = np.minimum(candidates, m - 1)
        cand_d2 = np.minimum(closest[:, None], squared_distances(points, points[candidates]))
        best = int(np.argmin(cand_d2.sum(axis=0)))
        centers[c] = points[candidates[best]]
        closest = cand_d2[:, best]
    return centers


def _update(points, labels, d2, centroids):
    k = len(centroids)
    counts = np.bincount(labels, minlength=k)
    sums = np.zeros_like(centroids)
    np.add.at(sums, labels, points)
    new = centroids.copy()
    filled = counts > 0
    new[filled] = sums[filled] / counts[filled, None]
    taken = set()
    for j in np.flatnonzero(~filled):
        # reseed to the point farthest from its current centroid
        order = np.argsort(-d2, kind="stable")
        far = next(int(i) for i in order if int(i) not in taken)
        taken.add(far)
        new[j] = points[far]
    return new


def kmeans(points, k: int, seed: int = 0, max_iter: int = 300, tol: float = 1e-6) -> KMeansModel:
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ShapeMismatch(f"points must be M x d, got {points.shape}")
    m = len(points)
    if k < 1 or m < k:
        raise TooFewPoints(f"need at least k={k} points, got {m}")
    if len(np.unique(points, axis=0)) < k:
        raise TooFewPoints(f"only {len(np.unique(points, axis=0))} distinct points for k={k}")

    rng = rng_for(seed)
    centroids = kmeans_plus_plus(points, k, rng)
    labels, d2 = nearest(points, centroids)
    history = [float(d2.sum())]
    it = 0
    while it < max_iter:
        it += 1
        new = _update(points, labels, d2, centroids)
        shift = float(np.sqrt(((new - centroids) ** 2).sum(axis=1)).max())
        centroids = new
        labels, d2 = nearest(points, centroids)
        history.append(float(d2.sum()))
        if shift < tol and np.bincount(labels, minlength=k).min() > 0:
            break
    # max_iter may stop with an empty cluster; repair until every cluster owns a point
    for _ in range(k):
        if np.bincount(labels, minlength=k).min() > 0:
            break
        centroids = _update(points, labels, d2, centroids)
        labels, d2 = nearest(points, centroids)
        history.append(float(d2.sum()))
    return KMeansModel(k, centroids, labels, float(d2.sum()), history, it)


def canonical_order(model: KMeansModel) -> np.ndarray:
    """Permutation raw cluster index -> canonical ID.

    Clusters are ranked by ascending centroid L2 norm, ties by their lowest member index.
    """
    norms = np.linalg.norm(model.centroids, axis=1)
    first_member = np.full(model.k, np.iinfo(np.int64).max)
    np.minimum.at(first_member, model.assignment, np.arange(len(model.assignment)))
    ranked = np.lexsort((first_member, norms))
    relabel = np.empty(model.k, dtype=np.int64)
    relabel[ranked] = np.arange(model.k)
    return relabel


@dataclass
class FactorModel:
    factor_of_neuron: np.ndarray  # (H,) factor id per neuron
    instance_models: list  # KMeansModel per factor, raw labels
    canonical_relabel: list  # per factor: raw index -> canonical ID
    train_ids: np.ndarray | None = None  # (N, K) IDs recorded during fit

    @property
    def n_factors(self) -> int:
        return len(self.instance_models)

    @property
    def n_neurons(self) -> int:
        return len(self.factor_of_neuron)

    @property
    def n_clusters(self) -> int:
        return self.instance_models[0].k

    def neurons(self, factor: int) -> np.ndarray:
        return np.flatnonzero(self.factor_of_neuron == factor)

    def canonical_centroids(self, factor: int) -> np.ndarray:
        """Centroids of `factor` reordered so row i is the centroid of canonical ID i."""
        model = self.instance_models[factor]
        out = np.empty_like(model.centroids)
        out[self.canonical_relabel[factor]] = model.centroids
        return out


def _order_factors(raw: np.ndarray, n: int) -> np.ndarray:
    # factor ids ordered by their lowest member neuron
    firsts = [int(np.flatnonzero(raw == f)[0]) for f in range(n)]
    remap = np.empty(n, dtype=np.int64)
    remap[np.argsort(firsts)] = np.arange(n)
    return remap[raw]


def factorize(activations: ActivationMatrix, n_factors: int, n_clusters: int, seed: int = 0,
              max_iter: int = 300, tol: float = 1e-6) -> FactorModel:
    """Level 1 clusters neurons (rows of S) into factors; level 2 clusters instances inside each factor."""
    s = activations.values
    h, n = s.shape
    if not 1 <= n_factors <= h:
        raise TooFewPoints(f"cannot form {n_factors} factors from {h} neurons")
    if not 1 <= n_clusters <= n:
        raise TooFewPoints(f"cannot form {n_clusters} clusters from {n} instances")

    level1 = kmeans(s, n_factors, mix_seed(seed, 0), max_iter, tol)
    factor_of_neuron = _order_factors(level1.assignment, n_factors)

    models, relabels = [], []
    ids = np.empty((n, n_factors), dtype=np.int64)
    for f in range(n_factors):
        sub = s[factor_of_neuron == f].T
        model = kmeans(sub, n_clusters, mix_seed(seed, f + 1), max_iter, tol)
        relabel = canonical_order(model)
        models.append(model)
        relabels.append(relabel)
        ids[:, f] = relabel[model.assignment]
    return FactorModel(factor_of_neuron, models, relabels, ids)


def assign_ids(factor_model: FactorModel, activations: ActivationMatrix) -> np.ndarray:
    """N x K canonical IDs by nearest centroid in each factor's neuron subspace."""
    s = activations.values
    if s.shape[0] != factor_model.n_neurons:
        raise ShapeMismatch(f"activations have {s.shape[0]} neurons, model expects {factor_model.n_neurons}")
    out = np.empty((s.shape[1], factor_model.n_factors), dtype=np.int64)
    for f in range(factor_model.n_factors):
        sub = s[factor_model.neurons(f)].T
        out[:, f], _ = nearest(sub, factor_model.canonical_centroids(f))
    return out
