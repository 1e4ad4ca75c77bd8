"""Gini CART trees and random forests.

One builder serves both: nodes are expanded best-first (largest impurity
decrease first), subject to an optional depth cap, an optional total-node cap
and an optional per-split feature subsample. Without a node cap the expansion
order does not matter, so the meta-learner's tree is the ordinary greedy CART
tree.

Trees are stored as flat arrays; node 0 is the root and a node is a leaf when
``feature[i] == -1``.
"""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

import numpy as np

from .dataset import rng_for
from .errors import EmptyDataset, ShapeMismatch

_MIN_DECREASE = 1e-12


@dataclass
class DecisionTree:
    feature: np.ndarray  # int64, -1 at leaves
    threshold: np.ndarray  # float64, nan at leaves
    left: np.ndarray  # int64 child ids, -1 at leaves
    right: np.ndarray
    histogram: np.ndarray  # (n_nodes, n_classes) int64 training counts
    depth: np.ndarray  # int64, root at 0
    n_features: int
    max_depth: int | None = None

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def n_classes(self) -> int:
        return self.histogram.shape[1]

    @property
    def predicted_class(self) -> np.ndarray:
        return self.histogram.argmax(axis=1)  # ties -> lowest class

    def is_leaf(self, node: int) -> bool:
        return self.feature[node] < 0

    def height(self) -> int:
        """Number of internal nodes on the longest root-to-leaf path."""
        return int(self.depth.max())

    def thresholds(self) -> np.ndarray:
        return self.threshold[self.feature >= 0]


def _node_split(codes, uniques, idx, y, n_classes, features, min_decrease, fallback=None):
    """Best split of the node holding rows `idx`.

    Returns (decrease, feature, threshold) or None. `features` are scanned as
    given; ties resolve to the lowest feature index, then the lowest threshold.
    `fallback` lists extra features tried one by one when no candidate in
    `features` can split (constant columns inside the node).
    """
    yy = y[idx]
    n = len(idx)
    parent = np.bincount(yy, minlength=n_classes)
    parent_term = float(parent @ parent) / n
    best = None

    def scan(f):
        u = uniques[f]
        col = codes[f][idx]
        hist = np.bincount(col.astype(np.int64) * n_classes + yy,
                           minlength=len(u) * n_classes).reshape(len(u), n_classes)
        present = np.flatnonzero(hist.any(axis=1))
        if len(present) < 2:
            return None
        h = hist[present]
        left = np.cumsum(h, axis=0)[:-1]
        nl = left.sum(axis=1).astype(np.float64)
        right = parent - left
        nr = n - nl
        gain = (np.einsum("ij,ij->i", left, left) / nl
                + np.einsum("ij,ij->i", right, right) / nr - parent_term)
        j = int(np.argmax(gain))
        # midpoint to the column's next distinct value, so integer IDs always give k + 0.5
        thr = 0.5 * (float(u[present[j]]) + float(u[present[j] + 1]))
        return float(gain[j]), thr

    for f in features:
        res = scan(f)
        if res is None:
            continue
        gain, thr = res
        if best is None or gain > best[0] or (gain == best[0] and f < best[1]):
            best = (gain, int(f), thr)
    if best is None and fallback is not None:
        for f in fallback:
            res = scan(f)
            if res is not None:
                best = (res[0], int(f), res[1])
                break
    if best is None or best[0] <= min_decrease * n:
        return None
    return best


def rank_columns(features: np.ndarray):
    """Per-column sorted distinct values and the rank code of every entry.

    Returns (codes, uniques) with codes[f] an int array over rows.
    """
    features = np.asarray(features, dtype=np.float64)
    codes, uniques = [], []
    for f in range(features.shape[1]):
        u, inv = np.unique(features[:, f], return_inverse=True)
        uniques.append(u)
        codes.append(inv.astype(np.uint16 if len(u) < 65536 else np.int64))
    return codes, uniques


def grow_tree(codes, uniques, labels, rows, n_classes, *, max_depth=None, max_nodes=None,
              min_samples_split=2, max_features=None, rng=None) -> DecisionTree:
    """Best-first growth over the row multiset `rows` (duplicates allowed, for bootstraps)."""
    n_features = len(codes)
    labels = np.asarray(labels, dtype=np.int64)
    rows = np.asarray(rows, dtype=np.int64)
    feature, threshold, left, right, hist, depth = [], [], [], [], [], []
    members = []

    def new_node(idx, d):
        feature.append(-1)
        threshold.append(np.nan)
        left.append(-1)
        right.append(-1)
        hist.append(np.bincount(labels[idx], minlength=n_classes))
        depth.append(d)
        members.append(idx)
        return len(feature) - 1

    def candidate(node):
        idx = members[node]
        h = hist[node]
        if len(idx) < min_samples_split or np.count_nonzero(h) < 2:
            return None
        if max_depth is not None and depth[node] >= max_depth:
            return None
        if max_features is None or max_features >= n_features:
            return _node_split(codes, uniques, idx, labels, n_classes, range(n_features), _MIN_DECREASE)
        perm = rng.permutation(n_features)
        chosen = np.sort(perm[:max_features])
        return _node_split(codes, uniques, idx, labels, n_classes, chosen, _MIN_DECREASE,
                           fallback=perm[max_features:])

    root = new_node(rows, 0)
    heap = []

    def push(node):
        split = candidate(node)
        if split is not None:
            heapq.heappush(heap, (-split[0], node, split[1], split[2]))

    push(root)
    while heap:
        if max_nodes is not None and len(feature) + 2 > max_nodes:
            break
        _, node, f, thr = heapq.heappop(heap)
        idx = members[node]
        go_left = uniques[f][codes[f][idx]] <= thr
        feature[node], threshold[node] = f, thr
        left[node] = new_node(idx[go_left], depth[node] + 1)
        right[node] = new_node(idx[~go_left], depth[node] + 1)
        members[node] = None
        push(left[node])
        push(right[node])

    return DecisionTree(np.array(feature, dtype=np.int64), np.array(threshold, dtype=np.float64),
                        np.array(left, dtype=np.int64), np.array(right, dtype=np.int64),
                        np.array(hist, dtype=np.int64).reshape(-1, n_classes),
                        np.array(depth, dtype=np.int64), n_features, max_depth)


def _check_xy(features, labels):
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if features.ndim != 2 or len(features) != len(labels):
        raise ShapeMismatch(f"features {features.shape} vs labels {labels.shape}")
    if len(labels) == 0:
        raise EmptyDataset("cannot fit on zero instances")
    if labels.min() < 0:
        raise ValueError("labels must be non-negative integers")
    return features, labels


def tree_fit(features, labels, max_depth: int | None = 5, min_samples_split: int = 2,
             n_classes: int | None = None) -> DecisionTree:
    features, labels = _check_xy(features, labels)
    n_classes = n_classes or int(labels.max()) + 1
    codes, uniques = rank_columns(features)
    return grow_tree(codes, uniques, labels, np.arange(len(labels)), n_classes,
                     max_depth=max_depth, min_samples_split=min_samples_split)


def apply(tree: DecisionTree, features) -> np.ndarray:
    """Leaf id reached by each row."""
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if x.shape[1] != tree.n_features:
        raise ShapeMismatch(f"expected {tree.n_features} features, got {x.shape[1]}")
    node = np.zeros(len(x), dtype=np.int64)
    active = np.flatnonzero(tree.feature[node] >= 0)
    while len(active):
        nd = node[active]
        go_left = x[active, tree.feature[nd]] <= tree.threshold[nd]
        node[active] = np.where(go_left, tree.left[nd], tree.right[nd])
        active = active[tree.feature[node[active]] >= 0]
    return node


def tree_predict_batch(tree: DecisionTree, features) -> np.ndarray:
    return tree.predicted_class[apply(tree, features)]


def tree_predict(tree: DecisionTree, instance):
    """(class, path) where path lists (feature, threshold, went_left) from the root."""
    x = np.asarray(instance, dtype=np.float64).ravel()
    if len(x) != tree.n_features:
        raise ShapeMismatch(f"expected {tree.n_features} features, got {len(x)}")
    node, path = 0, []
    while tree.feature[node] >= 0:
        f, thr = int(tree.feature[node]), float(tree.threshold[node])
        went_left = bool(x[f] <= thr)
        path.append((f, thr, went_left))
        node = int(tree.left[node] if went_left else tree.right[node])
    return int(tree.predicted_class[node]), path


# --- forests -----------------------------------------------------------------

@dataclass
class RandomForest:
    trees: list
    n_trees: int
    max_nodes: int | None
    seeds: list
    features_per_split: int
    n_classes: int
    bootstrap: bool = True
    n_samples: int = 0

    def bootstrap_rows(self, t: int) -> np.ndarray:
        if not self.bootstrap:
            return np.arange(self.n_samples)
        return rng_for(self.seeds[t], 0).integers(self.n_samples, size=self.n_samples)


def forest_fit(features, labels, n_trees: int = 20, max_nodes: int | None = 2000,
               features_per_split: int | None = None, seed: int = 0, bootstrap: bool = True,
               n_classes: int | None = None, ranked=None) -> RandomForest:
    """Bagged best-first trees. `ranked` may pass precomputed rank_columns(features)."""
    features, labels = _check_xy(features, labels)
    n, d = features.shape
    n_classes = n_classes or int(labels.max()) + 1
    if features_per_split is None:
        features_per_split = math.ceil(math.sqrt(d))
    codes, uniques = ranked if ranked is not None else rank_columns(features)
    seeds = [int(rng_for(seed, t).integers(2**63)) for t in range(n_trees)]
    forest = RandomForest([], n_trees, max_nodes, seeds, features_per_split, n_classes, bootstrap, n)
    for t in range(n_trees):
        rows = forest.bootstrap_rows(t)
        forest.trees.append(grow_tree(codes, uniques, labels, rows, n_classes, max_nodes=max_nodes,
                                      max_features=features_per_split, rng=rng_for(seeds[t], 1)))
    return forest


def _plurality(votes: np.ndarray, n_classes: int) -> np.ndarray:
    # votes: (n_trees, n); ties -> lowest label
    counts = np.zeros((votes.shape[1], n_classes), dtype=np.int64)
    for row in votes:
        counts[np.arange(votes.shape[1]), row] += 1
    return counts.argmax(axis=1)


def forest_predict_batch(forest: RandomForest, features) -> np.ndarray:
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    votes = np.stack([tree_predict_batch(t, x) for t in forest.trees])
    return _plurality(votes, forest.n_classes)


def forest_predict(forest: RandomForest, instance) -> int:
    return int(forest_predict_batch(forest, np.asarray(instance, dtype=np.float64).reshape(1, -1))[0])


def oob_accuracy(forest: RandomForest, features, labels) -> float:
    """Accuracy of out-of-bag plurality votes over rows that were left out by at least one tree."""
    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    counts = np.zeros((len(x), forest.n_classes), dtype=np.int64)
    for t, tree in enumerate(forest.trees):
        out = np.ones(len(x), dtype=bool)
        out[forest.bootstrap_rows(t)] = False
        rows = np.flatnonzero(out)
        counts[rows, tree_predict_batch(tree, x[rows])] += 1
    seen = counts.sum(axis=1) > 0
    return float(np.mean(counts[seen].argmax(axis=1) == labels[seen]))


# --- text form ---------------------------------------------------------------

def tree_to_text(tree: DecisionTree) -> str:
    """Pre-order, one node per line::

        tree classes=<c> features=<d> max_depth=<m|none> nodes=<n>
        split <depth> <feature> <threshold>
        leaf <depth> <count_0>,<count_1>,...
    """
    md = "none" if tree.max_depth is None else str(tree.max_depth)
    lines = [f"tree classes={tree.n_classes} features={tree.n_features} max_depth={md} nodes={tree.n_nodes}"]
    stack = [0]
    while stack:
        i = stack.pop()
        d = int(tree.depth[i])
        if tree.feature[i] >= 0:
            lines.append(f"split {d} {int(tree.feature[i])} {float(tree.threshold[i])!r}")
            stack.append(int(tree.right[i]))
            stack.append(int(tree.left[i]))
        else:
            lines.append(f"leaf {d} " + ",".join(str(int(c)) for c in tree.histogram[i]))
    return "\n".join(lines) + "\n"


def tree_from_text(text: str) -> DecisionTree:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    header = dict(kv.split("=") for kv in lines[0].split()[1:])
    n_classes, n_features = int(header["classes"]), int(header["features"])
    max_depth = None if header["max_depth"] == "none" else int(header["max_depth"])
    feature, threshold, left, right, hist, depth = [], [], [], [], [], []
    pending = []  # stack of (parent, side)
    for ln in lines[1:]:
        parts = ln.split()
        node = len(feature)
        if pending:
            parent, side = pending.pop()
            (left if side == 0 else right)[parent] = node
        depth.append(int(parts[1]))
        left.append(-1)
        right.append(-1)
        if parts[0] == "split":
            feature.append(int(parts[2]))
            threshold.append(float(parts[3]))
            hist.append(None)
            pending.append((node, 1))
            pending.append((node, 0))
        elif parts[0] == "leaf":
            feature.append(-1)
            threshold.append(np.nan)
            hist.append(np.array([int(c) for c in parts[2].split(",")], dtype=np.int64))
        else:
            raise ValueError(f"unrecognised tree line: {ln!r}")
    # internal histograms are the sums of their children
    for i in range(len(feature) - 1, -1, -1):
        if hist[i] is None:
            hist[i] = hist[left[i]] + hist[right[i]]
    return DecisionTree(np.array(feature, dtype=np.int64), np.array(threshold), np.array(left, dtype=np.int64),
                        np.array(right, dtype=np.int64), np.array(hist, dtype=np.int64).reshape(-1, n_classes),
                        np.array(depth, dtype=np.int64), n_features, max_depth)
