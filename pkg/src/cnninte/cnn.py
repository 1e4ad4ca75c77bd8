"""The conv-pool-conv-pool-fc-dropout-fc network, its training loop and fc1 extraction."""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field, asdict

import numpy as np

from . import nn
from .dataset import BatchPlan, Dataset, mix_seed, next_batch, rng_for
from .errors import EmptyDataset, ShapeMismatch

log = logging.getLogger(__name__)

# stream ids for splitting the run seed
_INIT_STREAM, _BATCH_STREAM, _DROPOUT_STREAM = 0, 1, 2


@dataclass
class CnnConfig:
    conv1_filters: int = 32
    conv2_filters: int = 64
    kernel_size: int = 5
    fc1_neurons: int = 128
    classes: int = 10
    dropout_keep: float = 0.5
    steps: int = 1000
    batch_size: int = 50
    learning_rate: float = 1e-4
    seed: int = 0
    image_size: int = 28

    def __post_init__(self):
        counts = (self.conv1_filters, self.conv2_filters, self.kernel_size, self.fc1_neurons,
                  self.classes, self.batch_size, self.image_size)
        if min(counts) <= 0 or self.steps < 0:
            raise ValueError(f"all counts must be positive: {self}")
        if not 0.0 < self.dropout_keep <= 1.0:
            raise ValueError(f"dropout_keep must be in (0, 1], got {self.dropout_keep}")
        if self.image_size % 4:
            raise ValueError("image_size must survive two 2x2 poolings")

    @property
    def fc1_inputs(self) -> int:
        side = self.image_size // 4
        return side * side * self.conv2_filters


@dataclass
class CnnModel:
    conv1: nn.LayerParams
    conv2: nn.LayerParams
    fc1: nn.LayerParams
    fc2: nn.LayerParams
    config: CnnConfig
    training_log: list = field(default_factory=list)

    LAYERS = ("conv1", "conv2", "fc1", "fc2")

    def layers(self):
        return [getattr(self, name) for name in self.LAYERS]

    def checksum(self) -> str:
        h = hashlib.sha256()
        for p in self.layers():
            h.update(np.ascontiguousarray(p.weights).tobytes())
            h.update(np.ascontiguousarray(p.biases).tobytes())
        return h.hexdigest()


@dataclass
class ActivationMatrix:
    values: np.ndarray  # (H, N), post-ReLU
    instance_labels: np.ndarray  # (N,)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.instance_labels = np.asarray(self.instance_labels, dtype=np.int64)
        if self.values.ndim != 2 or self.values.shape[1] != len(self.instance_labels):
            raise ShapeMismatch(f"activations {self.values.shape} vs {len(self.instance_labels)} labels")

    @property
    def neurons(self) -> int:
        return self.values.shape[0]

    @property
    def instances(self) -> int:
        return self.values.shape[1]


def init_model(config: CnnConfig) -> CnnModel:
    rng = rng_for(config.seed, _INIT_STREAM)
    k = config.kernel_size
    return CnnModel(
        conv1=nn.init_layer(rng, (k, k, 1, config.conv1_filters)),
        conv2=nn.init_layer(rng, (k, k, config.conv1_filters, config.conv2_filters)),
        fc1=nn.init_layer(rng, (config.fc1_inputs, config.fc1_neurons)),
        fc2=nn.init_layer(rng, (config.fc1_neurons, config.classes)),
        config=config,
    )


def _as_batch(model: CnnModel, batch) -> np.ndarray:
    x = np.asarray(batch, dtype=np.float64)
    side = model.config.image_size
    if x.ndim == 2 and x.shape[1] == side * side:
        x = x.reshape(-1, side, side)
    if x.ndim == 3:
        x = x[..., None]
    if x.shape[1:] != (side, side, 1):
        raise ShapeMismatch(f"expected N x {side} x {side} x 1 images, got {x.shape}")
    return x


def _forward(model: CnnModel, x: np.ndarray, dropout: nn.DropoutMask | None):
    cache = {"x": x}
    cache["c1"] = nn.conv2d_forward(x, model.conv1)
    p1, cache["a1"] = nn.maxpool_forward(nn.relu(cache["c1"]))
    cache["p1"] = p1
    cache["c2"] = nn.conv2d_forward(p1, model.conv2)
    r2 = nn.relu(cache["c2"])
    p2, cache["a2"] = nn.maxpool_forward(r2)
    flat = p2.reshape(len(x), -1)
    cache["flat"] = flat
    cache["h"] = nn.fc_forward(flat, model.fc1)
    act = nn.relu(cache["h"])
    dropped = nn.dropout_apply(act, dropout, training=dropout is not None)
    cache["dropped"] = dropped
    logits = nn.fc_forward(dropped, model.fc2)
    return logits, act, cache


def forward(model: CnnModel, batch, training: bool = False, dropout_seed: int = 0):
    """Returns (logits, fc1 activations). Activations are post-ReLU and pre-dropout."""
    x = _as_batch(model, batch)
    mask = None
    if training:
        mask = nn.DropoutMask.create((len(x), model.config.fc1_neurons), model.config.dropout_keep, dropout_seed)
    logits, act, _ = _forward(model, x, mask)
    return logits, act


def loss_and_grads(model: CnnModel, images, labels, mask: nn.DropoutMask | None):
    """Loss and {layer: (weight_grad, bias_grad)} for one batch."""
    cfg = model.config
    x = _as_batch(model, images)
    logits, _, c = _forward(model, x, mask)
    loss, g = nn.softmax_cross_entropy(logits, labels, cfg.classes)

    g, gw4, gb4 = nn.fc_backward(g, c["dropped"], model.fc2)
    if mask is not None:
        g = g * mask.mask
    g = nn.relu_backward(g, c["h"])
    g, gw3, gb3 = nn.fc_backward(g, c["flat"], model.fc1)
    g = g.reshape(c["a2"].shape)
    g = nn.maxpool_backward(g, c["a2"])
    g = nn.relu_backward(g, c["c2"])
    g, gw2, gb2 = nn.conv2d_backward(g, c["p1"], model.conv2)
    g = nn.maxpool_backward(g, c["a1"])
    g = nn.relu_backward(g, c["c1"])
    _, gw1, gb1 = nn.conv2d_backward(g, c["x"], model.conv1)
    return loss, {"conv1": (gw1, gb1), "conv2": (gw2, gb2), "fc1": (gw3, gb3), "fc2": (gw4, gb4)}


def train_step(model: CnnModel, images, labels, dropout_seed: int) -> float:
    cfg = model.config
    mask = nn.DropoutMask.create((len(labels), cfg.fc1_neurons), cfg.dropout_keep, dropout_seed)
    loss, grads = loss_and_grads(model, images, labels, mask)
    for name in CnnModel.LAYERS:
        nn.adam_step(getattr(model, name), *grads[name], cfg.learning_rate)
    return loss


def train(config: CnnConfig, data: Dataset, progress_every: int = 100) -> CnnModel:
    if data.count == 0:
        raise EmptyDataset("training set is empty")
    model = init_model(config)
    plan = BatchPlan(min(config.batch_size, data.count), mix_seed(config.seed, _BATCH_STREAM), data.count)
    dropout_base = mix_seed(config.seed, _DROPOUT_STREAM)
    for step in range(config.steps):
        images, labels = next_batch(data, plan, step)
        loss = train_step(model, images, labels, mix_seed(dropout_base, step))
        model.training_log.append(loss)
        if progress_every and (step + 1) % progress_every == 0:
            recent = np.mean(model.training_log[-progress_every:])
            log.info("step %d/%d  mean loss %.4f", step + 1, config.steps, recent)
    return model


def predict_logits(model: CnnModel, data: Dataset, batch_size: int = 500) -> np.ndarray:
    out = np.empty((data.count, model.config.classes))
    for start in range(0, data.count, batch_size):
        out[start:start + batch_size], _ = forward(model, data.images[start:start + batch_size])
    return out


def accuracy_from_logits(logits: np.ndarray, labels) -> float:
    labels = np.asarray(labels)
    if len(labels) == 0:
        return 0.0
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def evaluate(model: CnnModel, data: Dataset, batch_size: int = 500) -> float:
    return accuracy_from_logits(predict_logits(model, data, batch_size), data.labels)


def extract_activations(model: CnnModel, data: Dataset, batch_size: int = 500) -> ActivationMatrix:
    """fc1 outputs (dropout off) as an H x N matrix aligned with data.labels."""
    values = np.empty((model.config.fc1_neurons, data.count))
    for start in range(0, data.count, batch_size):
        _, act = forward(model, data.images[start:start + batch_size])
        values[:, start:start + batch_size] = act.T
    return ActivationMatrix(values, data.labels.copy())


def config_dict(config: CnnConfig) -> dict:
    return asdict(config)
