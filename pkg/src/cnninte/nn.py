"""Hand-written layers with explicit forward/backward passes.

Tensors are plain float64 numpy arrays in NHWC layout. Convolution kernels
are stored as (kh, kw, in_channels, out_channels).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NonFiniteGradient, ShapeMismatch

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class LayerParams:
    weights: np.ndarray
    biases: np.ndarray
    m_w: np.ndarray = None
    v_w: np.ndarray = None
    m_b: np.ndarray = None
    v_b: np.ndarray = None
    step_count: int = 0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.biases = np.asarray(self.biases, dtype=np.float64)
        for name, ref in (("m_w", self.weights), ("v_w", self.weights),
                          ("m_b", self.biases), ("v_b", self.biases)):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros_like(ref))

    def copy(self) -> "LayerParams":
        return LayerParams(self.weights.copy(), self.biases.copy(), self.m_w.copy(),
                           self.v_w.copy(), self.m_b.copy(), self.v_b.copy(), self.step_count)


def truncated_normal(rng: np.random.Generator, shape, stddev=0.1, bound=2.0) -> np.ndarray:
    """Normal(0, stddev) samples redrawn until they fall within +-bound*stddev."""
    out = rng.normal(0.0, stddev, size=shape)
    bad = np.abs(out) > bound * stddev
    while bad.any():
        out[bad] = rng.normal(0.0, stddev, size=int(bad.sum()))
        bad = np.abs(out) > bound * stddev
    return out


def init_layer(rng, weight_shape, stddev=0.1, bias=0.1) -> LayerParams:
    return LayerParams(truncated_normal(rng, weight_shape, stddev),
                       np.full(weight_shape[-1], bias, dtype=np.float64))


# --- convolution -------------------------------------------------------------

def _same_pads(k: int):
    total = k - 1
    return total // 2, total - total // 2


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    n, h, w, c = x.shape
    (pt, pb), (pl, pr) = _same_pads(kh), _same_pads(kw)
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # n, h, w, c, kh, kw
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * w, kh * kw * c)


def _check_conv(x, params):
    if x.ndim != 4:
        raise ShapeMismatch(f"conv input must be NHWC, got shape {x.shape}")
    if params.weights.ndim != 4 or params.weights.shape[2] != x.shape[3]:
        raise ShapeMismatch(f"kernel {params.weights.shape} does not match input channels {x.shape[3]}")


def conv2d_forward(x: np.ndarray, params: LayerParams) -> np.ndarray:
    """Stride-1 SAME convolution (cross-correlation, as in most frameworks)."""
    x = np.asarray(x, dtype=np.float64)
    _check_conv(x, params)
    kh, kw, cin, cout = params.weights.shape
    n, h, w, _ = x.shape
    cols = _im2col(x, kh, kw)
    out = cols @ params.weights.reshape(-1, cout) + params.biases
    return out.reshape(n, h, w, cout)


def conv2d_backward(upstream: np.ndarray, cached_input: np.ndarray, params: LayerParams):
    x = np.asarray(cached_input, dtype=np.float64)
    _check_conv(x, params)
    kh, kw, cin, cout = params.weights.shape
    n, h, w, _ = x.shape
    if upstream.shape != (n, h, w, cout):
        raise ShapeMismatch(f"upstream {upstream.shape} != forward output {(n, h, w, cout)}")
    up = upstream.reshape(-1, cout)
    cols = _im2col(x, kh, kw)
    weight_grad = (cols.T @ up).reshape(params.weights.shape)
    bias_grad = up.sum(axis=0)

    dcols = (up @ params.weights.reshape(-1, cout).T).reshape(n, h, w, kh, kw, cin)
    (pt, pb), (pl, pr) = _same_pads(kh), _same_pads(kw)
    dxp = np.zeros((n, h + pt + pb, w + pl + pr, cin))
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + h, j:j + w, :] += dcols[:, :, :, i, j, :]
    input_grad = dxp[:, pt:pt + h, pl:pl + w, :]
    return input_grad, weight_grad, bias_grad


# --- pooling -----------------------------------------------------------------

def maxpool_forward(x: np.ndarray):
    """2x2/stride-2 max pool. Returns (output, argmax) with argmax in 0..3 (row-major, first max wins)."""
    x = np.asarray(x, dtype=np.float64)
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeMismatch(f"pooling needs even spatial dims, got {h}x{w}")
    windows = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
    argmax = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, argmax[..., None], axis=-1)[..., 0]
    return out, argmax


def maxpool_backward(upstream: np.ndarray, argmax: np.ndarray) -> np.ndarray:
    n, ho, wo, c = argmax.shape
    if upstream.shape != argmax.shape:
        raise ShapeMismatch(f"upstream {upstream.shape} != pooled shape {argmax.shape}")
    grad = np.zeros((n, ho, wo, c, 4))
    np.put_along_axis(grad, argmax[..., None], upstream[..., None], axis=-1)
    return grad.reshape(n, ho, wo, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, 2 * ho, 2 * wo, c)


# --- dense -------------------------------------------------------------------

def fc_forward(x: np.ndarray, params: LayerParams) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.weights.shape[0]:
        raise ShapeMismatch(f"input {x.shape} incompatible with weights {params.weights.shape}")
    return x @ params.weights + params.biases


def fc_backward(upstream: np.ndarray, cached_input: np.ndarray, params: LayerParams):
    x = np.asarray(cached_input, dtype=np.float64)
    if upstream.shape != (x.shape[0], params.weights.shape[1]):
        raise ShapeMismatch(f"upstream {upstream.shape} does not match fc output")
    return upstream @ params.weights.T, x.T @ upstream, upstream.sum(axis=0)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(upstream: np.ndarray, cached_input: np.ndarray) -> np.ndarray:
    # subgradient 0 at exactly 0
    return upstream * (cached_input > 0)


# --- dropout -----------------------------------------------------------------

@dataclass
class DropoutMask:
    keep_probability: float
    mask: np.ndarray
    rng_seed: int = 0

    @classmethod
    def create(cls, shape, keep_probability: float, seed: int) -> "DropoutMask":
        if not 0.0 < keep_probability <= 1.0:
            raise ValueError(f"keep_probability must be in (0, 1], got {keep_probability}")
        rng = np.random.Generator(np.random.PCG64(seed))
        keep = rng.random(shape) < keep_probability
        return cls(keep_probability, keep / keep_probability, seed)


def dropout_apply(x: np.ndarray, mask: DropoutMask | None, *, training: bool) -> np.ndarray:
    if not training or mask is None:
        return x
    return x * mask.mask


# --- loss --------------------------------------------------------------------

def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray, num_classes: int = 10):
    """Mean NLL over the batch and its gradient w.r.t. the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[1] != num_classes or len(labels) != len(logits):
        raise ShapeMismatch(f"logits {logits.shape} / labels {labels.shape}")
    n = len(labels)
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(log_norm - z[np.arange(n), labels]))
    grad = np.exp(z - log_norm[:, None])
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


# --- optimizer ---------------------------------------------------------------

def adam_step(params: LayerParams, weight_grad, bias_grad, lr: float,
              beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2, eps: float = ADAM_EPS) -> LayerParams:
    """Bias-corrected Adam, updating `params` in place (and returning it)."""
    if not (np.all(np.isfinite(weight_grad)) and np.all(np.isfinite(bias_grad))):
        raise NonFiniteGradient("gradient contains NaN or Inf")
    t = params.step_count + 1
    corr1 = 1.0 - beta1 ** t
    corr2 = 1.0 - beta2 ** t
    for value, m, v, g in ((params.weights, params.m_w, params.v_w, weight_grad),
                           (params.biases, params.m_b, params.v_b, bias_grad)):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * np.square(g)
        value -= lr * (m / corr1) / (np.sqrt(v / corr2) + eps)
    params.step_count = t
    return params
