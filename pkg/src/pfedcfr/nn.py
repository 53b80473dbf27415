"""Small multi-layer perceptron with per-layer flat parameter vectors.

Every layer's parameters live in one float64 vector: the ``fan_in x fan_out``
weight matrix in row-major order followed by the ``fan_out`` bias. That flat
vector is the unit the server fuses, so nothing here hides it behind objects.
Layers are addressed 1..L in user-facing messages.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

ACTIVATIONS = ("relu", "identity")
ROLES = ("feature", "decision")

Params = list  # list[np.ndarray], one flat float64 vector per layer
PenaltyFn = Callable[[Sequence[np.ndarray]], "tuple[float, list[np.ndarray]]"]


class ShapeError(ValueError):
    """Parameters or inputs do not match the model layout."""

    def __init__(self, message: str, layer: Optional[int] = None):
        self.layer = layer
        if layer is not None:
            message = f"layer {layer}: {message}"
        super().__init__(message)


class NonFiniteLossError(FloatingPointError):
    """Training produced a NaN or infinite loss."""

    def __init__(self, value: float, context: Optional[dict] = None):
        self.value = value
        self.context = dict(context or {})
        where = ", ".join(f"{k}={v}" for k, v in self.context.items())
        super().__init__(f"non-finite loss {value!r}" + (f" ({where})" if where else ""))


@dataclass(frozen=True)
class LayerSpec:
    fan_in: int
    fan_out: int
    activation: str = "relu"
    role: str = "feature"

    def __post_init__(self):
        if self.fan_in < 1 or self.fan_out < 1:
            raise ValueError(f"fan_in and fan_out must be >= 1, got {self.fan_in}, {self.fan_out}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")

    @property
    def size(self) -> int:
        return self.fan_in * self.fan_out + self.fan_out


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple

    def __post_init__(self):
        layers = tuple(self.layers)
        object.__setattr__(self, "layers", layers)
        if not layers:
            raise ValueError("a model needs at least one layer")
        for i in range(len(layers) - 1):
            if layers[i].fan_out != layers[i + 1].fan_in:
                raise ValueError(
                    f"layer {i + 1} fan_out={layers[i].fan_out} does not match "
                    f"layer {i + 2} fan_in={layers[i + 1].fan_in}"
                )
        if layers[-1].activation != "identity":
            raise ValueError("the last layer must use the identity activation")
        roles = [layer.role for layer in layers]
        n_feature = roles.count("feature")
        if roles != ["feature"] * n_feature + ["decision"] * (len(roles) - n_feature):
            raise ValueError(f"feature layers must precede decision layers, got {roles}")

    @classmethod
    def mlp(cls, widths: Sequence[int], num_feature: Optional[int] = None) -> "ModelSpec":
        """Build a ReLU MLP from ``widths = [d_in, h_1, ..., C]``.

        The first ``num_feature`` layers are tagged as feature layers (default:
        all but the last) and the rest as decision layers.
        """
        depth = len(widths) - 1
        if depth < 1:
            raise ValueError("widths needs at least an input and an output size")
        if num_feature is None:
            num_feature = depth - 1
        if not 0 <= num_feature <= depth:
            raise ValueError(f"num_feature must lie in [0, {depth}]")
        layers = [
            LayerSpec(
                widths[i],
                widths[i + 1],
                "identity" if i == depth - 1 else "relu",
                "feature" if i < num_feature else "decision",
            )
            for i in range(depth)
        ]
        return cls(tuple(layers))

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def num_feature(self) -> int:
        return sum(layer.role == "feature" for layer in self.layers)

    @property
    def num_classes(self) -> int:
        return self.layers[-1].fan_out

    @property
    def input_dim(self) -> int:
        return self.layers[0].fan_in

    def check_params(self, params: Sequence[np.ndarray]) -> None:
        if len(params) != self.depth:
            raise ShapeError(f"expected {self.depth} layer vectors, got {len(params)}")
        for l, (layer, vec) in enumerate(zip(self.layers, params), start=1):
            if np.ndim(vec) != 1 or len(vec) != layer.size:
                raise ShapeError(
                    f"expected flat vector of length {layer.size}, got shape {np.shape(vec)}", l
                )


class Batch(NamedTuple):
    inputs: np.ndarray
    labels: np.ndarray


def split_layer(layer: LayerSpec, vec: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Views of the weight matrix (fan_in, fan_out) and bias inside ``vec``."""
    n_w = layer.fan_in * layer.fan_out
    return vec[:n_w].reshape(layer.fan_in, layer.fan_out), vec[n_w:]


def init_model(spec: ModelSpec, seed: int) -> Params:
    """Glorot-uniform weights and zero biases, fully determined by ``seed``."""
    rng = np.random.default_rng(seed)
    params = []
    for layer in spec.layers:
        bound = np.sqrt(6.0 / (layer.fan_in + layer.fan_out))
        vec = np.zeros(layer.size)
        vec[: layer.fan_in * layer.fan_out] = rng.uniform(-bound, bound, layer.fan_in * layer.fan_out)
        params.append(vec)
    return params


def forward(spec: ModelSpec, params: Sequence[np.ndarray], batch: Batch):
    """Run the layer chain. Returns ``(logits, cache)``; cache feeds ``backward``."""
    spec.check_params(params)
    x = np.asarray(batch.inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ShapeError(f"inputs of shape {x.shape} do not fit fan_in={spec.input_dim}", 1)
    cache = [x]
    h = x
    for layer, vec in zip(spec.layers, params):
        w, b = split_layer(layer, vec)
        z = h @ w + b
        h = np.maximum(z, 0.0) if layer.activation == "relu" else z
        cache.append(z)
        cache.append(h)
    return h, cache


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    m = logits.shape[0]
    rows = np.arange(m)
    loss = float(np.mean(log_z - shifted[rows, labels]))
    probs = np.exp(shifted - log_z[:, None])
    probs[rows, labels] -= 1.0
    return loss, probs / m


def backward(spec: ModelSpec, params: Sequence[np.ndarray], cache, grad_logits: np.ndarray) -> Params:
    grads = [None] * spec.depth
    g = grad_logits
    for i in range(spec.depth - 1, -1, -1):
        layer = spec.layers[i]
        h_in, z = cache[2 * i], cache[2 * i + 1]
        if layer.activation == "relu":
            g = g * (z > 0)
        w, _ = split_layer(layer, params[i])
        grads[i] = np.concatenate([(h_in.T @ g).ravel(), g.sum(axis=0)])
        if i:
            g = g @ w.T
    return grads


def _check_labels(spec: ModelSpec, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= spec.num_classes):
        raise ShapeError(f"labels must lie in [0, {spec.num_classes})", spec.depth)
    return labels


def loss_and_grad(
    spec: ModelSpec,
    params: Sequence[np.ndarray],
    batch: Batch,
    extra: Optional[PenaltyFn] = None,
    data_weight: float = 1.0,
    context: Optional[dict] = None,
):
    """Mean softmax cross-entropy (times ``data_weight``) plus an optional penalty.

    ``extra(params)`` must return ``(value, per-layer gradient)``.
    Raises NonFiniteLossError, tagged with ``context``, if the total is not finite.
    """
    labels = _check_labels(spec, batch.labels)
    logits, cache = forward(spec, params, batch)
    loss, g_logits = softmax_cross_entropy(logits, labels)
    grads = backward(spec, params, cache, g_logits)
    if data_weight != 1.0:
        loss = data_weight * loss
        grads = [data_weight * g for g in grads]
    if extra is not None:
        p_value, p_grad = extra(params)
        loss = loss + p_value
        grads = [g + pg for g, pg in zip(grads, p_grad)]
    if not np.isfinite(loss):
        raise NonFiniteLossError(loss, context)
    return loss, grads


def sgd_step(params: Sequence[np.ndarray], grad: Sequence[np.ndarray], eta: float) -> Params:
    if eta < 0:
        raise ValueError(f"eta must be non-negative, got {eta}")
    return [p - eta * g for p, g in zip(params, grad)]


def layer_distance_sq(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"cannot compare vectors of shapes {a.shape} and {b.shape}")
    d = a - b
    return float(d @ d)


def copy_params(params: Sequence[np.ndarray]) -> Params:
    return [np.array(p, dtype=np.float64, copy=True) for p in params]
