"""Dense feedforward math: layer types, reverse-mode backward pass, SGD updates.

Tensors are plain numpy float64 arrays, row-major, rank <= 2. A batch is laid
out one sample per row. Only the layer kinds the rest of the package needs are
supported: affine maps, ReLU, and a final softmax.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, NonFinite, StaleTape

Array = np.ndarray

# Probabilities below this floor are clamped before any log.
PROB_FLOOR = 1e-12


def as_batch(x, dim: int | None = None) -> Array:
    """Coerce `x` to a float64 (batch, features) matrix, validating shape."""
    a = np.ascontiguousarray(np.asarray(x, dtype=np.float64))
    if a.ndim == 1:
        a = a.reshape(1, -1)
    if a.ndim != 2 or a.shape[0] < 1:
        raise DimensionMismatch(f"expected a rank-2 batch, got shape {a.shape}")
    if dim is not None and a.shape[1] != dim:
        raise DimensionMismatch(f"expected {dim} columns, got {a.shape[1]}")
    return a


def check_finite(a: Array, what: str) -> Array:
    if not np.isfinite(a).all():
        raise NonFinite(f"{what} contains NaN or Inf")
    return a


@dataclass
class Affine:
    """y = x @ weight.T + bias with weight of shape (out, in)."""

    weight: Array
    bias: Array
    trainable: bool = True
    # Bumped on every in-place parameter update; lets tapes detect staleness.
    version: int = field(default=0, compare=False)

    def __post_init__(self):
        self.weight = np.ascontiguousarray(np.asarray(self.weight, dtype=np.float64))
        self.bias = np.ascontiguousarray(np.asarray(self.bias, dtype=np.float64))
        if self.weight.ndim != 2 or self.bias.ndim != 1:
            raise DimensionMismatch("affine expects rank-2 weight and rank-1 bias")
        if self.weight.shape[0] != self.bias.shape[0]:
            raise DimensionMismatch(
                f"weight rows {self.weight.shape[0]} != bias length {self.bias.shape[0]}"
            )

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


@dataclass
class Relu:
    trainable: bool = True


@dataclass
class Softmax:
    trainable: bool = True


Layer = Affine | Relu | Softmax


def glorot_affine(fan_in: int, fan_out: int, rng: np.random.Generator,
                  trainable: bool = True) -> Affine:
    """Affine layer with weights uniform in +-sqrt(6/(fan_in+fan_out)), zero bias."""
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    weight = rng.uniform(-limit, limit, size=(fan_out, fan_in))
    return Affine(weight, np.zeros(fan_out), trainable=trainable)


def validate_layers(layers: list[Layer]) -> None:
    """Check the softmax-placement rule and inter-layer width consistency."""
    width = None
    for i, layer in enumerate(layers):
        if isinstance(layer, Softmax) and i != len(layers) - 1:
            raise DimensionMismatch("softmax is only allowed as the final layer")
        if isinstance(layer, Affine):
            if width is not None and layer.in_dim != width:
                raise DimensionMismatch(
                    f"layer {i} expects {layer.in_dim} inputs but receives {width}"
                )
            width = layer.out_dim


def in_width(layers: list[Layer]) -> int | None:
    """Input width required by the first affine layer, or None if there is none."""
    for layer in layers:
        if isinstance(layer, Affine):
            return layer.in_dim
    return None


def out_width(layers: list[Layer], fallback: int | None = None) -> int | None:
    """Output width produced by the last affine layer."""
    for layer in reversed(layers):
        if isinstance(layer, Affine):
            return layer.out_dim
    return fallback


def _softmax(u: Array) -> Array:
    z = u - u.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class GradientTape:
    """Per-layer cached inputs from one forward pass.

    Valid only for the exact parameter values used to produce it; any
    sgd_step on the same layers invalidates it.
    """

    inputs: list[Array]
    output: Array
    versions: list[int | None]

    def _check_fresh(self, layers: list[Layer]) -> None:
        if len(layers) != len(self.inputs):
            raise StaleTape("tape was recorded for a different layer list")
        for layer, ver in zip(layers, self.versions):
            if isinstance(layer, Affine):
                if ver is None or layer.version != ver:
                    raise StaleTape("parameters changed since the forward pass")
            elif ver is not None:
                raise StaleTape("tape was recorded for a different layer list")


def forward(layers: list[Layer], x) -> tuple[Array, GradientTape]:
    """Apply `layers` to batch `x` row-wise; returns output and tape."""
    h = as_batch(x, in_width(layers))
    inputs: list[Array] = []
    versions: list[int | None] = []
    for i, layer in enumerate(layers):
        inputs.append(h)
        if isinstance(layer, Affine):
            if h.shape[1] != layer.in_dim:
                raise DimensionMismatch(
                    f"layer {i} expects {layer.in_dim} inputs, got {h.shape[1]}"
                )
            h = h @ layer.weight.T + layer.bias
            versions.append(layer.version)
        elif isinstance(layer, Relu):
            h = np.maximum(h, 0.0)
            versions.append(None)
        elif isinstance(layer, Softmax):
            if i != len(layers) - 1:
                raise DimensionMismatch("softmax is only allowed as the final layer")
            h = _softmax(h)
            versions.append(None)
        else:
            raise TypeError(f"unknown layer kind {type(layer).__name__}")
    check_finite(h, "forward output")
    return h, GradientTape(inputs=inputs, output=h, versions=versions)


ParamGrads = list[tuple[Array, Array] | None]


def backward(layers: list[Layer], tape: GradientTape,
             upstream_grad) -> tuple[ParamGrads, Array]:
    """Chain `upstream_grad` (d loss / d output, one row per sample) backwards.

    Parameter gradients are summed over the batch, so a loss that averages
    over the batch yields batch-averaged gradients. The returned input
    gradient stays per-sample.
    """
    tape._check_fresh(layers)
    grad = as_batch(upstream_grad)
    if grad.shape != tape.output.shape:
        raise DimensionMismatch(
            f"upstream grad shape {grad.shape} != output shape {tape.output.shape}"
        )
    param_grads: ParamGrads = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        layer = layers[i]
        x_in = tape.inputs[i]
        if isinstance(layer, Affine):
            param_grads[i] = (grad.T @ x_in, grad.sum(axis=0))
            grad = grad @ layer.weight
        elif isinstance(layer, Relu):
            grad = grad * (x_in > 0.0)
        elif isinstance(layer, Softmax):
            p = _softmax(x_in)
            inner = (grad * p).sum(axis=1, keepdims=True)
            grad = p * (grad - inner)
    check_finite(grad, "input gradient")
    return param_grads, grad


def sgd_step(layers: list[Layer], param_grads: ParamGrads,
             learning_rate: float) -> list[Layer]:
    """In-place parameter -= learning_rate * grad on trainable affine layers."""
    for layer, grads in zip(layers, param_grads):
        if not isinstance(layer, Affine) or not layer.trainable or grads is None:
            continue
        d_weight, d_bias = grads
        if d_weight.shape != layer.weight.shape or d_bias.shape != layer.bias.shape:
            raise DimensionMismatch("gradient shapes do not match parameters")
        layer.weight -= learning_rate * d_weight
        layer.bias -= learning_rate * d_bias
        layer.version += 1
    return layers


def log_probs(probs: Array) -> Array:
    """log(probs) with probabilities clamped to PROB_FLOOR to avoid -inf."""
    return np.log(np.maximum(probs, PROB_FLOOR))
