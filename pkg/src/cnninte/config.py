"""Run configuration: defaults, `key = value` files, environment and flag overrides."""
from __future__ import annotations

import os
from dataclasses import dataclass, fields
from pathlib import Path

from .cnn import CnnConfig
from .dataset import TEST_IMAGES, TEST_LABELS, TRAIN_IMAGES, TRAIN_LABELS
from .meta import EnsembleConfig

SEED_ENV = "CNNINTE_SEED"


@dataclass
class RunConfig:
    data_dir: str = "data/mnist"
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    train_count: int = 55_000
    test_count: int = 10_000
    steps: int = 1000
    batch_size: int = 50
    dropout_keep: float = 0.5
    fc1_neurons: int = 128
    learning_rate: float = 1e-4
    factors: int = 8
    clusters: int = 10
    tree_depth: int = 5
    trees: int = 20
    max_nodes: int = 2000
    seed: int = 0
    out: str = "runs/default"

    def validate(self):
        counts = ("train_count", "test_count", "batch_size", "fc1_neurons", "factors", "clusters",
                  "tree_depth", "trees", "max_nodes")
        for name in counts:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if not 0.0 < self.dropout_keep <= 1.0:
            raise ValueError(f"dropout_keep must be in (0, 1], got {self.dropout_keep}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        return self

    def path(self, which: str) -> Path:
        explicit = getattr(self, which)
        if explicit:
            return Path(explicit)
        names = {"train_images": TRAIN_IMAGES, "train_labels": TRAIN_LABELS,
                 "test_images": TEST_IMAGES, "test_labels": TEST_LABELS}
        return Path(self.data_dir) / names[which]

    def cnn(self) -> CnnConfig:
        return CnnConfig(fc1_neurons=self.fc1_neurons, dropout_keep=self.dropout_keep, steps=self.steps,
                         batch_size=self.batch_size, learning_rate=self.learning_rate, seed=self.seed)

    def ensemble(self, factors: int | None = None) -> EnsembleConfig:
        return EnsembleConfig(factors or self.factors, self.clusters, self.tree_depth, self.trees,
                              self.max_nodes, self.seed)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def coerce(key: str, value: str):
    if key not in _TYPES:
        raise KeyError(f"unknown config key {key!r}")
    kind = _TYPES[key]
    if kind in ("int", int):
        return int(value.replace("_", ""), 0) if value.lower().startswith("0x") else int(value.replace("_", ""))
    if kind in ("float", float):
        return float(value)
    return value


def parse_config_text(text: str) -> dict:
    out = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = coerce(key, value)
    return out


def resolve(file_values: dict | None = None, flag_values: dict | None = None, environ=None) -> RunConfig:
    """defaults < config file < CNNINTE_SEED < explicit flags."""
    environ = os.environ if environ is None else environ
    values = {}
    values.update(file_values or {})
    if environ.get(SEED_ENV):
        values["seed"] = coerce("seed", environ[SEED_ENV])
    values.update({k: v for k, v in (flag_values or {}).items() if v is not None})
    return RunConfig(**values).validate()
