"""Split models and the binary checkpoint format.

Checkpoint layout (all integers little-endian):

    magic "RLTM" | version u8 (0x01) | layer count u16
    per layer: kind u8 (0=affine, 1=relu, 2=softmax) | trainable u8
               affine only: rows u32 | cols u32 | W row-major f64 | b f64

The partition point is not stored separately: front layers carry
trainable=1, back layers trainable=0, so a partitioned model round-trips
through the flags.
"""

from __future__ import annotations

import copy
import hashlib
import io
import struct
from dataclasses import dataclass

import numpy as np

from .errors import CheckpointError, DimensionMismatch
from .tensor import Affine, Layer, Relu, Softmax, glorot_affine, in_width, out_width, validate_layers

MAGIC = b"RLTM"
FORMAT_VERSION = 1

_KIND_CODES = {Affine: 0, Relu: 1, Softmax: 2}


def make_mlp(dims: list[int], rng: np.random.Generator, softmax: bool = True) -> list[Layer]:
    """Affine+ReLU stack over `dims`, ReLU between affines, optional softmax head."""
    if len(dims) < 2:
        raise DimensionMismatch("need at least input and output widths")
    layers: list[Layer] = []
    for i in range(len(dims) - 1):
        layers.append(glorot_affine(dims[i], dims[i + 1], rng))
        if i < len(dims) - 2:
            layers.append(Relu())
    if softmax:
        layers.append(Softmax())
    return layers


def dump_layers(layers: list[Layer]) -> bytes:
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<BH", FORMAT_VERSION, len(layers)))
    for layer in layers:
        kind = _KIND_CODES[type(layer)]
        out.write(struct.pack("<BB", kind, 1 if layer.trainable else 0))
        if isinstance(layer, Affine):
            rows, cols = layer.weight.shape
            out.write(struct.pack("<II", rows, cols))
            out.write(np.ascontiguousarray(layer.weight, dtype="<f8").tobytes())
            out.write(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())
    return out.getvalue()


def _read_exact(buf: io.BytesIO, n: int) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise CheckpointError("checkpoint truncated")
    return data


def parse_layers(data: bytes) -> list[Layer]:
    buf = io.BytesIO(data)
    if _read_exact(buf, 4) != MAGIC:
        raise CheckpointError("bad checkpoint magic")
    version, count = struct.unpack("<BH", _read_exact(buf, 3))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    layers: list[Layer] = []
    for _ in range(count):
        kind, trainable = struct.unpack("<BB", _read_exact(buf, 2))
        if kind == 0:
            rows, cols = struct.unpack("<II", _read_exact(buf, 8))
            weight = np.frombuffer(_read_exact(buf, rows * cols * 8), dtype="<f8")
            bias = np.frombuffer(_read_exact(buf, rows * 8), dtype="<f8")
            layers.append(Affine(weight.reshape(rows, cols).copy(), bias.copy(),
                                 trainable=bool(trainable)))
        elif kind == 1:
            layers.append(Relu(trainable=bool(trainable)))
        elif kind == 2:
            layers.append(Softmax(trainable=bool(trainable)))
        else:
            raise CheckpointError(f"unknown layer kind {kind}")
    if buf.read(1):
        raise CheckpointError("trailing bytes after last layer")
    return layers


def save_model(path, layers: list[Layer]) -> None:
    with open(path, "wb") as fh:
        fh.write(dump_layers(layers))


def load_model(path) -> list[Layer]:
    with open(path, "rb") as fh:
        return parse_layers(fh.read())


def model_digest(layers: list[Layer]) -> str:
    """Hex digest of the serialized layers; stable identity for frozen parts."""
    return hashlib.sha256(dump_layers(layers)).hexdigest()


@dataclass
class SplitModel:
    """A layer stack partitioned into a trainable front and a frozen back.

    `frozen_original_front` keeps a deep copy of the front partition as it
    was at partition time (the pre-trained feature extractor); it is never
    updated and feeds the discriminator's "real" representation stream.
    """

    layers: list[Layer]
    split_index: int
    frozen_original_front: list[Layer]

    @classmethod
    def partition(cls, layers: list[Layer], split_index: int) -> "SplitModel":
        if not 0 < split_index < len(layers):
            raise DimensionMismatch(
                f"split index {split_index} outside (0, {len(layers)})"
            )
        validate_layers(layers)
        for i, layer in enumerate(layers):
            layer.trainable = i < split_index
        original = copy.deepcopy(layers[:split_index])
        for layer in original:
            layer.trainable = False
        return cls(layers=layers, split_index=split_index,
                   frozen_original_front=original)

    def refresh_frozen_front(self) -> None:
        """Re-snapshot the frozen copy from the live front.

        For function-preserving reparametrizations (gain rebalancing) applied
        after partition but before any retraining; the copy still computes
        the pre-trained feature map.
        """
        self.frozen_original_front = copy.deepcopy(self.front)
        for layer in self.frozen_original_front:
            layer.trainable = False

    @property
    def front(self) -> list[Layer]:
        return self.layers[: self.split_index]

    @property
    def back(self) -> list[Layer]:
        return self.layers[self.split_index:]

    @property
    def ir_width(self) -> int:
        width = out_width(self.front)
        if width is None:
            raise DimensionMismatch("front partition has no affine layer")
        return width

    @property
    def n_classes(self) -> int:
        width = out_width(self.back)
        if width is None:
            raise DimensionMismatch("back partition has no affine layer")
        return width

    @property
    def input_width(self) -> int:
        width = in_width(self.front)
        if width is None:
            raise DimensionMismatch("front partition has no affine layer")
        return width


def rebalance_gain(layers: list[Layer], boundary: int, gain: float) -> None:
    """Shrink the representation at `boundary` by `gain` without changing the
    network function: the last affine before the boundary is divided by gain
    (weights and bias) and the first affine at or after it is multiplied
    (weights only). Every layer in between must be positively homogeneous
    (ReLU), which makes the two scalings cancel exactly.
    """
    if gain <= 0:
        raise ValueError(f"gain must be positive, got {gain}")
    before = [i for i, l in enumerate(layers[:boundary]) if isinstance(l, Affine)]
    after = [boundary + i for i, l in enumerate(layers[boundary:])
             if isinstance(l, Affine)]
    if not before or not after:
        raise DimensionMismatch("need an affine layer on each side of the boundary")
    feed, follow = before[-1], after[0]
    for i in range(feed + 1, follow):
        if not isinstance(layers[i], Relu):
            raise DimensionMismatch(
                "only ReLU layers may sit between the rebalanced affines")
    layers[feed].weight /= gain
    layers[feed].bias /= gain
    layers[follow].weight *= gain
    layers[feed].version += 1
    layers[follow].version += 1


def split_from_flags(layers: list[Layer]) -> SplitModel:
    """Rebuild a SplitModel from a checkpoint whose flags encode the partition."""
    flags = [layer.trainable for layer in layers]
    if not any(flags) or all(flags):
        raise CheckpointError("checkpoint is not partitioned (trainable flags)")
    split_index = flags.index(False)
    if any(flags[split_index:]):
        raise CheckpointError("trainable flags are not front-contiguous")
    return SplitModel.partition(layers, split_index)
