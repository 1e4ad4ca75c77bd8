"""Meta-level datasets and the ensemble (meta tree + per-factor base forests)."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import forest as F
from .clustering import FactorModel, factorize
from .cnn import ActivationMatrix
from .dataset import Dataset, mix_seed
from .errors import ShapeMismatch

log = logging.getLogger(__name__)

_FACTOR_STREAM = 10
_FOREST_STREAM = 100


@dataclass
class MetaDataset:
    features: np.ndarray  # (N, K) cluster IDs
    labels: np.ndarray  # (N,) original digit labels
    role: str = "train"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or len(self.features) != len(self.labels):
            raise ShapeMismatch(f"meta features {self.features.shape} vs labels {self.labels.shape}")

    def __len__(self):
        return len(self.labels)


@dataclass
class EnsembleConfig:
    n_factors: int = 8
    n_clusters: int = 10
    tree_depth: int = 5
    n_trees: int = 20
    max_nodes: int = 2000
    seed: int = 0


@dataclass
class Ensemble:
    meta_learner: F.DecisionTree
    base_models: list
    factor_model: FactorModel
    config: EnsembleConfig
    meta_train: MetaDataset | None = field(default=None, repr=False)

    @property
    def n_factors(self) -> int:
        return len(self.base_models)


def build_meta_train(factor_model: FactorModel, activations: ActivationMatrix, labels) -> MetaDataset:
    """Row i, column k: the canonical ID the level-2 clustering gave instance i in factor k."""
    labels = np.asarray(labels)
    h, n = activations.values.shape
    if h != factor_model.n_neurons or len(labels) != n:
        raise ShapeMismatch(f"activations {h}x{n}, labels {len(labels)}, model has {factor_model.n_neurons} neurons")
    cols = []
    for f, model in enumerate(factor_model.instance_models):
        if len(model.assignment) != n:
            raise ShapeMismatch(f"factor {f} clustered {len(model.assignment)} instances, expected {n}")
        cols.append(factor_model.canonical_relabel[f][model.assignment])
    return MetaDataset(np.stack(cols, axis=1), labels, "train")


def train_ensemble(activations: ActivationMatrix, train_data: Dataset, config: EnsembleConfig | None = None,
                   ranked=None) -> Ensemble:
    config = config or EnsembleConfig()
    if activations.instances != train_data.count:
        raise ShapeMismatch("activations and training data disagree on instance count")
    log.info("factorizing %d neurons x %d instances (K=%d, C=%d)", activations.neurons,
             activations.instances, config.n_factors, config.n_clusters)
    factor_model = factorize(activations, config.n_factors, config.n_clusters, mix_seed(config.seed, _FACTOR_STREAM))
    meta_train = build_meta_train(factor_model, activations, train_data.labels)
    meta_tree = F.tree_fit(meta_train.features, meta_train.labels, max_depth=config.tree_depth, n_classes=10)

    x = train_data.flat()
    if ranked is None:
        ranked = F.rank_columns(x)
    forests = []
    for k in range(config.n_factors):
        log.info("fitting base forest %d/%d", k + 1, config.n_factors)
        forests.append(F.forest_fit(x, meta_train.features[:, k], n_trees=config.n_trees,
                                    max_nodes=config.max_nodes, seed=mix_seed(config.seed, _FOREST_STREAM + k),
                                    n_classes=config.n_clusters, ranked=ranked))
    return Ensemble(meta_tree, forests, factor_model, config, meta_train)


def build_meta_test(ensemble: Ensemble, test_data: Dataset) -> MetaDataset:
    x = test_data.flat()
    expected = ensemble.base_models[0].trees[0].n_features if ensemble.base_models else x.shape[1]
    if x.shape[1] != expected:
        raise ShapeMismatch(f"test features have width {x.shape[1]}, base models expect {expected}")
    cols = [F.forest_predict_batch(m, x) for m in ensemble.base_models]
    return MetaDataset(np.stack(cols, axis=1), test_data.labels, "test")


def meta_predict(ensemble: Ensemble, meta: MetaDataset) -> np.ndarray:
    return F.tree_predict_batch(ensemble.meta_learner, meta.features)


def evaluate_ensemble(ensemble: Ensemble, meta_test: MetaDataset) -> float:
    if len(meta_test) == 0:
        return 0.0
    return float(np.mean(meta_predict(ensemble, meta_test) == meta_test.labels))


def confusion_matrix(labels, predictions, n_classes: int = 10) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels), np.asarray(predictions)), 1)
    return cm

