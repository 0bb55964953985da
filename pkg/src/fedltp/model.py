"""Small feed-forward network with manual backprop and a fixed sparsity mask.

Parameters live in one flat float64 vector.  Each dense layer contributes its
weight matrix (``in_dim x out_dim``, row-major) followed by its bias, and the
mask is a boolean vector of the same length.  Pruned coordinates are zero in
the parameter vector at all times and never receive gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from .errors import InvalidInputError, ShapeError

DENSE = "dense"
RELU = "relu"
SOFTMAX_CE = "softmax_ce"


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_dim: int
    out_dim: int

    @property
    def n_params(self) -> int:
        if self.kind == DENSE:
            return self.in_dim * self.out_dim + self.out_dim
        return 0


def dense(in_dim: int, out_dim: int) -> LayerSpec:
    return LayerSpec(DENSE, in_dim, out_dim)


def mlp_layers(sizes: Sequence[int]) -> List[LayerSpec]:
    """``[in, h1, ..., classes]`` -> dense/relu stack ending in a loss head."""
    if len(sizes) < 2:
        raise InvalidInputError("an MLP needs at least an input and an output size")
    layers: List[LayerSpec] = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(dense(a, b))
        if i < len(sizes) - 2:
            layers.append(LayerSpec(RELU, b, b))
    layers.append(LayerSpec(SOFTMAX_CE, sizes[-1], sizes[-1]))
    return layers


def check_layers(layers: Sequence[LayerSpec]) -> None:
    if not layers or layers[-1].kind != SOFTMAX_CE:
        raise ShapeError("the last layer must be the softmax cross-entropy head")
    for i, layer in enumerate(layers):
        if layer.kind not in (DENSE, RELU, SOFTMAX_CE):
            raise ShapeError(f"unknown layer kind {layer.kind!r}")
        if layer.kind == SOFTMAX_CE and i != len(layers) - 1:
            raise ShapeError("exactly one loss head is allowed, at the end")
        if layer.kind != DENSE and layer.in_dim != layer.out_dim:
            raise ShapeError(f"layer {i} ({layer.kind}) must preserve its width")
        if i > 0 and layers[i - 1].out_dim != layer.in_dim:
            raise ShapeError(
                f"layer {i} expects {layer.in_dim} inputs but layer {i - 1} "
                f"produces {layers[i - 1].out_dim}"
            )


def param_layout(layers: Sequence[LayerSpec]) -> List[Tuple[int, int]]:
    """(offset, length) of every dense layer, weights and bias together."""
    layout = []
    offset = 0
    for layer in layers:
        if layer.kind == DENSE:
            layout.append((offset, layer.n_params))
            offset += layer.n_params
    return layout


def n_params(layers: Sequence[LayerSpec]) -> int:
    return sum(layer.n_params for layer in layers)


def init_params(layers: Sequence[LayerSpec], rng: np.random.Generator) -> np.ndarray:
    """Glorot-uniform draw for weights and biases of every dense layer."""
    chunks = []
    for layer in layers:
        if layer.kind == DENSE:
            a = math.sqrt(6.0 / (layer.in_dim + layer.out_dim))
            chunks.append(rng.uniform(-a, a, size=layer.n_params))
    return np.concatenate(chunks) if chunks else np.zeros(0)


@dataclass
class MaskedModel:
    params: np.ndarray
    mask: np.ndarray
    layers: List[LayerSpec] = field(default_factory=list)

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.params.shape != self.mask.shape:
            raise ShapeError("params and mask must have the same length")
        if self.layers and n_params(self.layers) != self.params.size:
            raise ShapeError(
                f"layers describe {n_params(self.layers)} parameters, "
                f"got {self.params.size}"
            )

    @classmethod
    def create(cls, layers, rng, mask=None) -> "MaskedModel":
        check_layers(layers)
        params = init_params(layers, rng)
        if mask is None:
            mask = np.ones(params.size, dtype=bool)
        return cls(params * mask, mask, list(layers))

    @property
    def d(self) -> int:
        return self.params.size

    @property
    def retention(self) -> float:
        return float(self.mask.mean()) if self.mask.size else 0.0

    def with_mask(self, mask: np.ndarray) -> "MaskedModel":
        mask = np.asarray(mask, dtype=bool)
        return MaskedModel(self.params * mask, mask, self.layers)

    def with_params(self, params: np.ndarray) -> "MaskedModel":
        return MaskedModel(np.asarray(params, dtype=np.float64) * self.mask, self.mask, self.layers)

    def copy(self) -> "MaskedModel":
        return MaskedModel(self.params.copy(), self.mask.copy(), self.layers)


def _unpack(model: MaskedModel):
    """Yield (layer, W, b) views into the flat vector, None for non-dense."""
    offset = 0
    for layer in model.layers:
        if layer.kind == DENSE:
            nw = layer.in_dim * layer.out_dim
            W = model.params[offset:offset + nw].reshape(layer.in_dim, layer.out_dim)
            b = model.params[offset + nw:offset + nw + layer.out_dim]
            offset += nw + layer.out_dim
            yield layer, W, b
        else:
            yield layer, None, None


def forward(model: MaskedModel, batch: np.ndarray) -> np.ndarray:
    """Class scores (logits) of shape ``(n, classes)``."""
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.layers[0].in_dim:
        raise ShapeError(
            f"batch has shape {x.shape}, first layer expects {model.layers[0].in_dim} features"
        )
    for layer, W, b in _unpack(model):
        if layer.kind == DENSE:
            x = x @ W + b
        elif layer.kind == RELU:
            x = np.maximum(x, 0.0)
    return x


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def loss_and_grad(model: MaskedModel, batch: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over the batch and its gradient (zero off-support)."""
    x = np.asarray(batch, dtype=np.float64)
    y = np.asarray(labels)
    n = x.shape[0] if x.ndim == 2 else 0
    if n == 0:
        raise InvalidInputError("loss_and_grad needs a non-empty batch")
    if x.shape[1] != model.layers[0].in_dim:
        raise ShapeError(
            f"batch has {x.shape[1]} features, first layer expects {model.layers[0].in_dim}"
        )
    classes = model.layers[-1].out_dim
    if y.shape != (n,) or y.min() < 0 or y.max() >= classes:
        raise InvalidInputError(f"labels must be {n} class ids in [0, {classes})")

    views = list(_unpack(model))
    acts = [x]
    for layer, W, b in views:
        if layer.kind == DENSE:
            x = x @ W + b
        elif layer.kind == RELU:
            x = np.maximum(x, 0.0)
        acts.append(x)

    logp = _log_softmax(x)
    rows = np.arange(n)
    loss = float(-logp[rows, y].mean())

    delta = np.exp(logp)
    delta[rows, y] -= 1.0
    delta /= n

    grad_chunks = []
    for i in range(len(views) - 1, -1, -1):
        layer, W, _ = views[i]
        if layer.kind == DENSE:
            a_prev = acts[i]
            grad_chunks.append(delta.sum(axis=0))
            grad_chunks.append((a_prev.T @ delta).ravel())
            delta = delta @ W.T
        elif layer.kind == RELU:
            delta = delta * (acts[i] > 0)
    grad = np.concatenate(grad_chunks[::-1]) if grad_chunks else np.zeros(0)
    return loss, grad * model.mask


def clip_gradient(grad: np.ndarray, clip: float) -> np.ndarray:
    """Scale ``grad`` by ``min(1, clip / ||grad||_2)``."""
    if clip <= 0:
        raise InvalidInputError("clipping threshold must be positive")
    norm = float(np.linalg.norm(grad))
    if norm <= clip:
        return np.array(grad, dtype=np.float64, copy=True)
    return grad * (clip / norm)


def sgd_momentum_step(model: MaskedModel, update: np.ndarray, lr: float,
                      momentum: float, buffer: np.ndarray):
    """One heavy-ball step; returns the new model and momentum buffer."""
    if lr <= 0:
        raise InvalidInputError("learning rate must be positive")
    if not 0.0 <= momentum < 1.0:
        raise InvalidInputError("momentum must lie in [0, 1)")
    buffer = momentum * buffer + update
    params = (model.params - lr * buffer) * model.mask
    return MaskedModel(params, model.mask, model.layers), buffer


def predict(model: MaskedModel, features: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the lowest class index on ties
    return np.argmax(forward(model, features), axis=1)


def evaluate(model: MaskedModel, features: np.ndarray, labels: np.ndarray) -> int:
    """Number of correctly classified examples."""
    labels = np.asarray(labels)
    if labels.size == 0:
        return 0
    return int(np.count_nonzero(predict(model, features) == labels))
