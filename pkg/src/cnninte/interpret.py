"""Per-instance traces: walk the meta tree path and test each hypothesis class for separability.

Survivor sets are filtered on the training instances' meta features (their
cluster IDs); the scatter coordinates come from those survivors' raw fc1
activations inside the factor the tree node tests.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import forest as F
from .clustering import FactorModel
from .cnn import ActivationMatrix
from .errors import InconsistentEnsemble, IndexOutOfRange
from .meta import Ensemble, MetaDataset

SEPARATED = "SEPARATED"
OVERLAPPING = "OVERLAPPING"
DISPLAY_LIMIT = 400


@dataclass
class Projection:
    mean: np.ndarray
    components: np.ndarray  # (2, d), orthonormal rows (zero rows when rank < 2)
    degenerate: bool = False

    def apply(self, points: np.ndarray) -> np.ndarray:
        if self.degenerate:
            return np.zeros((len(points), 2))
        return (np.asarray(points, dtype=np.float64) - self.mean) @ self.components.T


def fit_projection(points: np.ndarray) -> Projection:
    """Rank-2 PCA basis of `points` (rows). Signs fixed so each axis' largest loading is positive."""
    points = np.asarray(points, dtype=np.float64)
    mean = points.mean(axis=0)
    centred = points - mean
    d = points.shape[1]
    if not np.any(centred):
        return Projection(mean, np.zeros((2, d)), degenerate=True)
    _, _, vt = np.linalg.svd(centred, full_matrices=False)
    comps = np.zeros((2, d))
    r = min(2, vt.shape[0])
    comps[:r] = vt[:r]
    for i in range(r):
        j = np.argmax(np.abs(comps[i]))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    return Projection(mean, comps)


def project_2d(activations: ActivationMatrix, factor_model: FactorModel, factor_index: int, instance_set,
               projection: Projection | None = None):
    """2-D coordinates of the instances' activations in one factor's neuron subspace.

    Returns (coords, projection); the projection is fitted on `instance_set` unless supplied.
    """
    idx = np.asarray(instance_set, dtype=np.int64)
    if projection is None and len(idx) == 0:
        raise ValueError("cannot fit a projection on an empty instance set")
    sub = activations.values[factor_model.neurons(factor_index)][:, idx].T
    if projection is None:
        projection = fit_projection(sub)
    return projection.apply(sub), projection


def display_subset(indices: np.ndarray, limit: int = DISPLAY_LIMIT) -> np.ndarray:
    """Evenly spaced picks from a sorted index set, so plots stay small and deterministic."""
    if len(indices) <= limit:
        return indices
    picks = np.unique(np.round(np.linspace(0, len(indices) - 1, limit)).astype(np.int64))
    return indices[picks]


@dataclass
class TraceStep:
    depth: int
    factor_index: int
    condition: tuple  # (feature, threshold, "<=" | ">")
    n_true: int
    n_hypo: int
    surviving_true: np.ndarray | None = None
    surviving_hypo: np.ndarray | None = None
    shown_true: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    shown_hypo: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    points_true: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    points_hypo: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    degenerate: bool = False
    digest: str = ""


@dataclass
class HypothesisColumn:
    hypothesis: int
    steps: list
    verdict: str
    true_exhausted: bool = False

    @property
    def verdict_depth(self) -> int:
        return len(self.steps)


@dataclass
class InterpretationTrace:
    instance_index: int
    true_class: int
    predicted_class: int
    features: tuple
    path: list  # [(feature, threshold, went_left)]
    columns: list  # HypothesisColumn, ascending hypothesis

    @property
    def correct(self) -> bool:
        return self.true_class == self.predicted_class

    def separated_count(self) -> int:
        return sum(c.verdict == SEPARATED for c in self.columns)

    def column(self, hypothesis: int) -> HypothesisColumn:
        for c in self.columns:
            if c.hypothesis == hypothesis:
                return c
        raise KeyError(hypothesis)


def _digest(a: np.ndarray, b: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(np.asarray(a, dtype="<i8").tobytes())
    h.update(b"|")
    h.update(np.asarray(b, dtype="<i8").tobytes())
    return h.hexdigest()[:16]


def path_masks(meta_train: MetaDataset, path) -> list:
    """Boolean survivor masks over training rows after each accumulated path condition."""
    mask = np.ones(len(meta_train), dtype=bool)
    out = []
    for f, thr, went_left in path:
        col = meta_train.features[:, f]
        mask = mask & ((col <= thr) if went_left else (col > thr))
        out.append(mask)
    return out


def trace(ensemble: Ensemble, meta_test: MetaDataset, meta_train: MetaDataset, activations: ActivationMatrix,
          instance_index: int, n_classes: int = 10, display_limit: int = DISPLAY_LIMIT) -> InterpretationTrace:
    if not 0 <= instance_index < len(meta_test):
        raise IndexOutOfRange(f"instance {instance_index} outside 0..{len(meta_test) - 1}")
    tree = ensemble.meta_learner
    if meta_test.features.shape[1] != tree.n_features or meta_train.features.shape[1] != tree.n_features:
        raise InconsistentEnsemble("meta feature width does not match the meta tree")
    if activations.instances != len(meta_train) or activations.neurons != ensemble.factor_model.n_neurons:
        raise InconsistentEnsemble("activation matrix does not align with the meta training set")

    x = meta_test.features[instance_index]
    true_class = int(meta_test.labels[instance_index])
    predicted, path = F.tree_predict(tree, x)
    masks = path_masks(meta_train, path)
    labels = meta_train.labels

    columns = []
    for h in range(n_classes):
        if h == true_class:
            continue
        steps, verdict, exhausted = [], OVERLAPPING, False
        projections = {}
        for depth, ((f, thr, went_left), mask) in enumerate(zip(path, masks), start=1):
            st = np.flatnonzero(mask & (labels == true_class))
            sh = np.flatnonzero(mask & (labels == h))
            if f not in projections:
                union = np.union1d(st, sh)
                if len(union):
                    _, projections[f] = project_2d(activations, ensemble.factor_model, f, union)
                else:
                    n_dim = len(ensemble.factor_model.neurons(f))
                    projections[f] = Projection(np.zeros(n_dim), np.zeros((2, n_dim)), True)
            proj = projections[f]
            show_t, show_h = display_subset(st, display_limit), display_subset(sh, display_limit)
            pt, _ = project_2d(activations, ensemble.factor_model, f, show_t, proj)
            ph, _ = project_2d(activations, ensemble.factor_model, f, show_h, proj)
            # 6 decimals keeps the text form lossless
            pt, ph = np.round(pt, 6), np.round(ph, 6)
            steps.append(TraceStep(depth, int(f), (int(f), float(thr), "<=" if went_left else ">"),
                                   len(st), len(sh), st, sh, show_t, show_h, pt, ph, proj.degenerate,
                                   _digest(st, sh)))
            if len(st) == 0:
                exhausted = True
                break
            if len(sh) == 0:
                verdict = SEPARATED
                break
        columns.append(HypothesisColumn(h, steps, verdict, exhausted))
    return InterpretationTrace(instance_index, true_class, predicted, tuple(int(v) for v in x), path, columns)


# --- text form ---------------------------------------------------------------

def _fmt_points(points: np.ndarray) -> list:
    return [[float(a), float(b)] for a, b in points]


def trace_to_text(tr: InterpretationTrace) -> str:
    """Line-oriented JSON: a header line, then one line per column and one per step."""
    lines = [json.dumps({
        "kind": "trace", "instance": tr.instance_index, "true": tr.true_class, "pred": tr.predicted_class,
        "correct": tr.correct, "features": list(tr.features),
        "path": [[f, thr, "<=" if left else ">"] for f, thr, left in tr.path],
    }, sort_keys=True)]
    for col in tr.columns:
        lines.append(json.dumps({"kind": "column", "hypothesis": col.hypothesis, "verdict": col.verdict,
                                 "steps": len(col.steps), "true_exhausted": col.true_exhausted}, sort_keys=True))
        for s in col.steps:
            lines.append(json.dumps({
                "kind": "step", "hypothesis": col.hypothesis, "depth": s.depth, "factor": s.factor_index,
                "condition": list(s.condition), "n_true": s.n_true, "n_hypo": s.n_hypo,
                "digest": s.digest, "degenerate": s.degenerate,
                "shown_true": [int(i) for i in s.shown_true], "shown_hypo": [int(i) for i in s.shown_hypo],
                "points_true": _fmt_points(s.points_true), "points_hypo": _fmt_points(s.points_hypo),
            }, sort_keys=True))
    return "\n".join(lines) + "\n"


def trace_from_text(text: str) -> InterpretationTrace:
    """Inverse of trace_to_text; full survivor sets are not stored, so they load as None."""
    records = [json.loads(ln) for ln in text.splitlines() if ln.strip()]
    head = records[0]
    if head.get("kind") != "trace":
        raise ValueError("not a trace document")
    path = [(int(f), float(t), d == "<=") for f, t, d in head["path"]]
    columns, by_h = [], {}
    for rec in records[1:]:
        if rec["kind"] == "column":
            col = HypothesisColumn(rec["hypothesis"], [], rec["verdict"], rec["true_exhausted"])
            columns.append(col)
            by_h[col.hypothesis] = col
        elif rec["kind"] == "step":
            by_h[rec["hypothesis"]].steps.append(TraceStep(
                rec["depth"], rec["factor"], (int(rec["condition"][0]), float(rec["condition"][1]), rec["condition"][2]),
                rec["n_true"], rec["n_hypo"], None, None,
                np.array(rec["shown_true"], dtype=np.int64), np.array(rec["shown_hypo"], dtype=np.int64),
                np.array(rec["points_true"], dtype=np.float64).reshape(-1, 2),
                np.array(rec["points_hypo"], dtype=np.float64).reshape(-1, 2),
                rec["degenerate"], rec["digest"]))
    return InterpretationTrace(head["instance"], head["true"], head["pred"], tuple(head["features"]), path, columns)
